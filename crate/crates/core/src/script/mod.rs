//! DataScript: the small, total scripting language used for activity
//! scripts, conditions and invocation arguments.
//!
//! Statements are `data.<name>[.field…] = expr`, `endpoints.<key> = expr` and
//! `status(code, text)`, separated by newlines or `;`. Expressions cover
//! numbers, strings, booleans, null, lists and maps, the identifiers
//! `data.<name>`, `endpoints.<key>` and `result`, member and index access,
//! and the usual arithmetic, comparison and boolean operators. There are no
//! loops and no calls, so every script terminates.

mod eval;
mod syntax;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::delta::Delta;

pub use syntax::{BinOp, Expr, ExprKind, Stmt, Target, UnOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptErrorKind {
    Syntax,
    Runtime,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[error("{kind:?} error at {at}: {message}")]
pub struct ScriptError {
    pub kind: ScriptErrorKind,
    pub message: String,
    pub at: Location,
}

impl ScriptError {
    pub(crate) fn syntax(message: impl Into<String>, at: Location) -> Self {
        ScriptError {
            kind: ScriptErrorKind::Syntax,
            message: message.into(),
            at,
        }
    }

    pub(crate) fn runtime(message: impl Into<String>, at: Location) -> Self {
        ScriptError {
            kind: ScriptErrorKind::Runtime,
            message: message.into(),
            at,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptKind {
    Prepare,
    Finalize,
    Update,
    Rescue,
    Condition,
}

impl ScriptKind {
    /// Whether dataelement writes outlive the script run.
    pub fn is_permanent(self) -> bool {
        matches!(
            self,
            ScriptKind::Finalize | ScriptKind::Update | ScriptKind::Rescue
        )
    }
}

/// Instance status as set through `status(code, text)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Status {
    pub code: i64,
    pub text: String,
}

/// Read-only inputs a script runs against.
#[derive(Debug, Clone, Copy)]
pub struct ScriptContext<'a> {
    pub dataelements: &'a BTreeMap<String, Value>,
    pub endpoints: &'a BTreeMap<String, String>,
    pub received: Option<&'a Value>,
}

impl<'a> ScriptContext<'a> {
    pub fn new(
        dataelements: &'a BTreeMap<String, Value>,
        endpoints: &'a BTreeMap<String, String>,
    ) -> Self {
        ScriptContext {
            dataelements,
            endpoints,
            received: None,
        }
    }

    pub fn with_received(mut self, received: &'a Value) -> Self {
        self.received = Some(received);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptOutcome {
    pub kind: ScriptKind,
    /// Dataelements as the script left them.
    pub dataelements: BTreeMap<String, Value>,
    pub dataelement_changes: Delta<Value>,
    pub endpoint_changes: Delta<String>,
    pub status: Option<Status>,
    /// Set for conditions only.
    pub value: Option<bool>,
    /// Dataelement names the script read.
    pub reads: BTreeSet<String>,
}

/// A parsed statement list.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    stmts: Vec<Stmt>,
}

impl Program {
    pub fn parse(src: &str) -> Result<Self, ScriptError> {
        Ok(Program {
            stmts: syntax::parse_program(src)?,
        })
    }

    pub fn run(
        &self,
        ctx: &ScriptContext<'_>,
        kind: ScriptKind,
    ) -> Result<ScriptOutcome, ScriptError> {
        let mut scope = eval::Scope::new(ctx);
        for stmt in &self.stmts {
            scope.exec(stmt)?;
        }
        Ok(scope.finish(ctx, kind, None))
    }
}

/// A parsed single expression (conditions and invocation arguments).
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    expr: Expr,
}

impl Expression {
    pub fn parse(src: &str) -> Result<Self, ScriptError> {
        Ok(Expression {
            expr: syntax::parse_expression(src)?,
        })
    }

    pub fn value(&self, ctx: &ScriptContext<'_>) -> Result<Value, ScriptError> {
        eval::Scope::new(ctx).eval(&self.expr)
    }

    /// Evaluates a condition, returning the outcome with `value` and `reads`.
    pub fn test(&self, ctx: &ScriptContext<'_>) -> Result<ScriptOutcome, ScriptError> {
        let mut scope = eval::Scope::new(ctx);
        match scope.eval(&self.expr)? {
            Value::Bool(b) => Ok(scope.finish(ctx, ScriptKind::Condition, Some(b))),
            other => Err(ScriptError::runtime(
                format!(
                    "condition must evaluate to a boolean, got {}",
                    eval::type_name(&other)
                ),
                self.expr.at,
            )),
        }
    }
}

/// Parses and runs `source` as a script of the given kind.
pub fn eval_script(
    source: &str,
    ctx: &ScriptContext<'_>,
    kind: ScriptKind,
) -> Result<ScriptOutcome, ScriptError> {
    match kind {
        ScriptKind::Condition => Expression::parse(source)?.test(ctx),
        _ => Program::parse(source)?.run(ctx, kind),
    }
}
