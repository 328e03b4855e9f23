use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde_json::{Map, Number, Value};

use super::syntax::{BinOp, Expr, ExprKind, Stmt, Target, UnOp};
use super::{Location, ScriptContext, ScriptError, ScriptKind, ScriptOutcome, Status};
use crate::delta::Delta;

pub(super) fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "list",
        Value::Object(_) => "map",
    }
}

pub(super) struct Scope<'a> {
    data: BTreeMap<String, Value>,
    endpoints: BTreeMap<String, String>,
    received: Option<&'a Value>,
    status: Option<Status>,
    reads: BTreeSet<String>,
}

impl<'a> Scope<'a> {
    pub(super) fn new(ctx: &ScriptContext<'a>) -> Self {
        Scope {
            data: ctx.dataelements.clone(),
            endpoints: ctx.endpoints.clone(),
            received: ctx.received,
            status: None,
            reads: BTreeSet::new(),
        }
    }

    pub(super) fn finish(
        self,
        ctx: &ScriptContext<'_>,
        kind: ScriptKind,
        value: Option<bool>,
    ) -> ScriptOutcome {
        ScriptOutcome {
            kind,
            dataelement_changes: Delta::between(ctx.dataelements, &self.data),
            endpoint_changes: Delta::between(ctx.endpoints, &self.endpoints),
            dataelements: self.data,
            status: self.status,
            value,
            reads: self.reads,
        }
    }

    pub(super) fn exec(&mut self, stmt: &Stmt) -> Result<(), ScriptError> {
        match stmt {
            Stmt::Status { code, text, at } => {
                let code = match self.eval(code)? {
                    Value::Number(n) if n.as_i64().is_some() => n.as_i64().unwrap_or_default(),
                    other => {
                        return Err(ScriptError::runtime(
                            format!("status code must be an integer, got {}", type_name(&other)),
                            *at,
                        ))
                    }
                };
                let text = match self.eval(text)? {
                    Value::String(s) => s,
                    other => other.to_string(),
                };
                self.status = Some(Status { code, text });
                Ok(())
            }
            Stmt::Assign {
                target: Target::Endpoint(key),
                value,
                at,
            } => match self.eval(value)? {
                Value::String(url) => {
                    self.endpoints.insert(key.clone(), url);
                    Ok(())
                }
                other => Err(ScriptError::runtime(
                    format!("endpoint values must be strings, got {}", type_name(&other)),
                    *at,
                )),
            },
            Stmt::Assign {
                target: Target::Data { name, path },
                value,
                at,
            } => {
                let v = self.eval(value)?;
                if path.is_empty() {
                    self.data.insert(name.clone(), v);
                    return Ok(());
                }
                let mut slot = self.data.get_mut(name).ok_or_else(|| {
                    ScriptError::runtime(format!("undefined dataelement '{name}'"), *at)
                })?;
                let (last, init) = path.split_last().expect("path is non-empty");
                for field in init {
                    slot = match slot {
                        Value::Object(m) => m
                            .entry(field.clone())
                            .or_insert_with(|| Value::Object(Map::new())),
                        other => {
                            return Err(ScriptError::runtime(
                                format!("cannot set field '{field}' on {}", type_name(other)),
                                *at,
                            ))
                        }
                    };
                }
                match slot {
                    Value::Object(m) => {
                        m.insert(last.clone(), v);
                        Ok(())
                    }
                    other => Err(ScriptError::runtime(
                        format!("cannot set field '{last}' on {}", type_name(other)),
                        *at,
                    )),
                }
            }
        }
    }

    pub(super) fn eval(&mut self, e: &Expr) -> Result<Value, ScriptError> {
        match &e.kind {
            ExprKind::Literal(v) => Ok(v.clone()),
            ExprKind::List(items) => Ok(Value::Array(
                items
                    .iter()
                    .map(|i| self.eval(i))
                    .collect::<Result<_, _>>()?,
            )),
            ExprKind::Map(entries) => {
                let mut m = Map::new();
                for (k, v) in entries {
                    m.insert(k.clone(), self.eval(v)?);
                }
                Ok(Value::Object(m))
            }
            ExprKind::Data(name) => {
                self.reads.insert(name.clone());
                self.data.get(name).cloned().ok_or_else(|| {
                    ScriptError::runtime(format!("undefined dataelement '{name}'"), e.at)
                })
            }
            ExprKind::Endpoint(key) => self
                .endpoints
                .get(key)
                .map(|s| Value::String(s.clone()))
                .ok_or_else(|| ScriptError::runtime(format!("undefined endpoint '{key}'"), e.at)),
            ExprKind::Result => self.received.cloned().ok_or_else(|| {
                ScriptError::runtime("'result' is only available after receiving", e.at)
            }),
            ExprKind::Member(obj, field) => {
                let v = self.eval(obj)?;
                member(&v, field, e.at)
            }
            ExprKind::Index(obj, idx) => {
                let v = self.eval(obj)?;
                let i = self.eval(idx)?;
                index(&v, &i, e.at)
            }
            ExprKind::Unary(op, operand) => {
                let v = self.eval(operand)?;
                match (op, v) {
                    (UnOp::Not, Value::Bool(b)) => Ok(Value::Bool(!b)),
                    (UnOp::Neg, Value::Number(n)) => {
                        if let Some(i) = n.as_i64() {
                            i.checked_neg()
                                .map(Value::from)
                                .ok_or_else(|| ScriptError::runtime("integer overflow", e.at))
                        } else {
                            float(-n.as_f64().unwrap_or_default(), e.at)
                        }
                    }
                    (op, v) => Err(ScriptError::runtime(
                        format!("cannot apply {op:?} to {}", type_name(&v)),
                        e.at,
                    )),
                }
            }
            ExprKind::Binary(BinOp::And, l, r) => {
                if self.boolean(l)? {
                    Ok(Value::Bool(self.boolean(r)?))
                } else {
                    Ok(Value::Bool(false))
                }
            }
            ExprKind::Binary(BinOp::Or, l, r) => {
                if self.boolean(l)? {
                    Ok(Value::Bool(true))
                } else {
                    Ok(Value::Bool(self.boolean(r)?))
                }
            }
            ExprKind::Binary(op, l, r) => {
                let a = self.eval(l)?;
                let b = self.eval(r)?;
                binary(*op, a, b, e.at)
            }
        }
    }

    fn boolean(&mut self, e: &Expr) -> Result<bool, ScriptError> {
        match self.eval(e)? {
            Value::Bool(b) => Ok(b),
            other => Err(ScriptError::runtime(
                format!("expected boolean, got {}", type_name(&other)),
                e.at,
            )),
        }
    }
}

fn member(v: &Value, field: &str, at: Location) -> Result<Value, ScriptError> {
    match (v, field) {
        (Value::Object(m), _) => Ok(m.get(field).cloned().unwrap_or(Value::Null)),
        (Value::Array(a), "length") => Ok(Value::from(a.len())),
        (Value::String(s), "length") => Ok(Value::from(s.chars().count())),
        (other, _) => Err(ScriptError::runtime(
            format!("cannot read field '{field}' of {}", type_name(other)),
            at,
        )),
    }
}

fn index(v: &Value, i: &Value, at: Location) -> Result<Value, ScriptError> {
    match (v, i) {
        (Value::Array(a), Value::Number(n)) => {
            let idx = n.as_u64().ok_or_else(|| {
                ScriptError::runtime(
                    format!("list index must be a non-negative integer, got {n}"),
                    at,
                )
            })?;
            Ok(a.get(idx as usize).cloned().unwrap_or(Value::Null))
        }
        (Value::Object(m), Value::String(k)) => Ok(m.get(k).cloned().unwrap_or(Value::Null)),
        (v, i) => Err(ScriptError::runtime(
            format!("cannot index {} with {}", type_name(v), type_name(i)),
            at,
        )),
    }
}

fn float(f: f64, at: Location) -> Result<Value, ScriptError> {
    Number::from_f64(f)
        .map(Value::Number)
        .ok_or_else(|| ScriptError::runtime("arithmetic produced a non-finite number", at))
}

/// Equality with numbers compared by value (`1 == 1.0`).
pub(super) fn equal(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => match (x.as_i64(), y.as_i64()) {
            (Some(i), Some(j)) => i == j,
            _ => x.as_f64() == y.as_f64(),
        },
        (Value::Array(x), Value::Array(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(a, b)| equal(a, b))
        }
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| equal(v, w)))
        }
        _ => a == b,
    }
}

fn binary(op: BinOp, a: Value, b: Value, at: Location) -> Result<Value, ScriptError> {
    let mismatch = |a: &Value, b: &Value| {
        ScriptError::runtime(
            format!("type mismatch: {} {op:?} {}", type_name(a), type_name(b)),
            at,
        )
    };
    match op {
        BinOp::Eq => return Ok(Value::Bool(equal(&a, &b))),
        BinOp::Ne => return Ok(Value::Bool(!equal(&a, &b))),
        BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
            let ord = match (&a, &b) {
                (Value::Number(x), Value::Number(y)) => match (x.as_i64(), y.as_i64()) {
                    (Some(i), Some(j)) => i.cmp(&j),
                    _ => x
                        .as_f64()
                        .unwrap_or_default()
                        .partial_cmp(&y.as_f64().unwrap_or_default())
                        .unwrap_or(Ordering::Equal),
                },
                (Value::String(x), Value::String(y)) => x.cmp(y),
                _ => return Err(mismatch(&a, &b)),
            };
            let r = match op {
                BinOp::Lt => ord == Ordering::Less,
                BinOp::Le => ord != Ordering::Greater,
                BinOp::Gt => ord == Ordering::Greater,
                _ => ord != Ordering::Less,
            };
            return Ok(Value::Bool(r));
        }
        _ => {}
    }
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => arith(op, &x, &y, at),
        (Value::String(x), Value::String(y)) if op == BinOp::Add => Ok(Value::String(x + &y)),
        (Value::Array(mut x), Value::Array(y)) if op == BinOp::Add => {
            x.extend(y);
            Ok(Value::Array(x))
        }
        (Value::Object(mut x), Value::Object(y)) if op == BinOp::Add => {
            x.extend(y);
            Ok(Value::Object(x))
        }
        (a, b) => Err(mismatch(&a, &b)),
    }
}

fn arith(op: BinOp, x: &Number, y: &Number, at: Location) -> Result<Value, ScriptError> {
    if let (Some(i), Some(j)) = (x.as_i64(), y.as_i64()) {
        let overflow = || ScriptError::runtime("integer overflow", at);
        return match op {
            BinOp::Add => i.checked_add(j).map(Value::from).ok_or_else(overflow),
            BinOp::Sub => i.checked_sub(j).map(Value::from).ok_or_else(overflow),
            BinOp::Mul => i.checked_mul(j).map(Value::from).ok_or_else(overflow),
            BinOp::Div | BinOp::Rem if j == 0 => Err(ScriptError::runtime("division by zero", at)),
            BinOp::Div if i % j == 0 => Ok(Value::from(i / j)),
            BinOp::Div => float(i as f64 / j as f64, at),
            BinOp::Rem => Ok(Value::from(i % j)),
            _ => unreachable!("non-arithmetic operator"),
        };
    }
    let (a, b) = (
        x.as_f64().unwrap_or_default(),
        y.as_f64().unwrap_or_default(),
    );
    match op {
        BinOp::Add => float(a + b, at),
        BinOp::Sub => float(a - b, at),
        BinOp::Mul => float(a * b, at),
        BinOp::Div | BinOp::Rem if b == 0.0 => Err(ScriptError::runtime("division by zero", at)),
        BinOp::Div => float(a / b, at),
        BinOp::Rem => float(a % b, at),
        _ => unreachable!("non-arithmetic operator"),
    }
}
