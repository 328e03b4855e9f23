//! The activity lifecycle: votes, scripts, invocation and failure handling.

use std::collections::BTreeMap;
use std::sync::atomic::Ordering;

use serde_json::{json, Map, Value};
use tokio::sync::{mpsc, watch};

use super::run::Ctx;
use crate::delta::{Change, Delta};
use crate::engine::{string_delta_to_values, Category, ChangeDecision};
use crate::event::Topic;
use crate::gateway::{ValueTarget, Verdict};
use crate::lifecycle::ActivityState;
use crate::model::{Node, Position};
use crate::protocol::{
    invoke, CallbackMessage, CallbackRecord, InvocationContext, Pattern, Payload,
};
use crate::script::{eval_script, Expression, ScriptContext, ScriptError, ScriptKind, Status};

pub(super) enum Flow {
    Continue,
    Halt(Position),
}

enum Attempt {
    Done,
    Failed(Failure),
    Halt(Position),
}

struct Failure {
    message: String,
    salvage: bool,
    detail: Value,
}

impl Failure {
    fn new(message: impl Into<String>) -> Self {
        Failure {
            message: message.into(),
            salvage: false,
            detail: Value::Null,
        }
    }

    fn script(kind: ScriptKind, e: &ScriptError) -> Self {
        Failure::new(format!("{kind:?} script: {e}").to_lowercase())
    }

    fn as_value(&self) -> Value {
        json!({"message": self.message, "salvage": self.salvage, "detail": self.detail})
    }
}

enum Rescue {
    Ignore,
    Retry,
    Stop,
}

/// One enactment of an activity.
struct Act {
    id: String,
    label: String,
    enactment: String,
}

impl Act {
    fn new(ctx: &Ctx, node: &Node) -> Self {
        let n = ctx.cell.next_enactment(&node.id);
        Act::resumed(ctx, node, format!("{}-enactment-{n}", node.id))
    }

    fn resumed(ctx: &Ctx, node: &Node, enactment: String) -> Self {
        ctx.unit.enactments.fetch_add(1, Ordering::Relaxed);
        Act {
            id: node.id.clone(),
            label: node.label.clone(),
            enactment,
        }
    }

    fn content(&self, extra: Value) -> Value {
        let mut m = Map::new();
        m.insert("activity".into(), Value::String(self.id.clone()));
        m.insert("label".into(), Value::String(self.label.clone()));
        m.insert("enactment".into(), Value::String(self.enactment.clone()));
        if let Value::Object(extra) = extra {
            m.extend(extra);
        }
        Value::Object(m)
    }

    fn emit(&self, ctx: &Ctx, state: ActivityState, extra: Value) {
        ctx.engine.emit(
            &ctx.cell,
            Topic::Activity,
            state.as_str(),
            self.content(extra),
        );
    }

    fn task_event(&self, ctx: &Ctx, name: &str, content: Value) {
        ctx.engine.emit(
            &ctx.cell,
            Topic::Task,
            name,
            self.content(json!({"content": content})),
        );
    }

    fn finish(&self, ctx: &Ctx) {
        let status = ctx.cell.lock().status.clone();
        self.emit(ctx, ActivityState::Status, json!({"status": status}));
        self.emit(ctx, ActivityState::Done, json!({}));
    }
}

async fn stop_instance(ctx: &Ctx) {
    ctx.engine.stop_on_error(&ctx.cell).await;
}

/// Applies `set_values` actions of a vote to the context, without voting
/// again.
async fn apply_values(ctx: &Ctx, verdict: &Verdict) {
    let values = verdict.values();
    if values.iter().all(|v| v.name.is_none()) {
        return;
    }
    let _guard = ctx.cell.context.lock().await;
    for (target, category) in [
        (ValueTarget::Dataelement, Category::Dataelements),
        (ValueTarget::Endpoint, Category::Endpoints),
        (ValueTarget::Attribute, Category::Attributes),
    ] {
        let current = ctx
            .engine
            .context(ctx.cell.id, category)
            .unwrap_or_default();
        let mut delta = Delta::default();
        for v in values.iter().filter(|v| v.target == target) {
            let Some(name) = &v.name else { continue };
            match current.get(name) {
                Some(old) if old == &v.value => {}
                Some(old) => {
                    delta.changed.insert(
                        name.clone(),
                        Change {
                            from: old.clone(),
                            to: v.value.clone(),
                        },
                    );
                }
                None => {
                    delta.added.insert(name.clone(), v.value.clone());
                }
            }
        }
        if let Err(e) = ctx.engine.commit_change(&ctx.cell, category, &delta) {
            tracing::warn!(instance = ctx.cell.id, error = %e, "vote value not applied");
        }
    }
}

/// Runs a finalize, update or rescue script whose writes are kept. Changes
/// go through change votes; a stop vote stops the instance.
async fn run_permanent(
    ctx: &Ctx,
    source: &str,
    kind: ScriptKind,
    received: &Value,
) -> Result<Option<Status>, ScriptError> {
    let guard = ctx.cell.context.lock().await;
    let (data, endpoints) = {
        let d = ctx.cell.lock();
        (d.dataelements.clone(), d.endpoints.clone())
    };
    let out = eval_script(
        source,
        &ScriptContext::new(&data, &endpoints).with_received(received),
        kind,
    )?;
    let mut stop = false;
    for (category, delta) in [
        (Category::Dataelements, out.dataelement_changes.clone()),
        (
            Category::Endpoints,
            string_delta_to_values(&out.endpoint_changes),
        ),
    ] {
        if delta.is_empty() {
            continue;
        }
        match ctx.engine.vote_change(&ctx.cell, category, delta).await {
            ChangeDecision::Apply(d) => {
                if let Err(e) = ctx.engine.commit_change(&ctx.cell, category, &d) {
                    tracing::warn!(instance = ctx.cell.id, error = %e, "script change not applied");
                }
            }
            ChangeDecision::Reject(_) => {}
            ChangeDecision::Stop => {
                stop = true;
                break;
            }
        }
    }
    if let (false, Some(status)) = (stop, &out.status) {
        ctx.cell.lock().status = status.clone();
        ctx.engine.emit(
            &ctx.cell,
            Topic::Status,
            "change",
            json!({"code": status.code, "text": status.text}),
        );
    }
    drop(guard);
    if stop {
        stop_instance(ctx).await;
    }
    Ok(out.status)
}

/// Enacts a call activity. `resume` is the callback id of an enactment
/// that was waiting for its answer when the instance stopped.
pub(super) async fn call(ctx: &Ctx, id: &str, resume: Option<String>) -> Flow {
    let node = ctx.plan.node(id).expect("compiled node").clone();
    let mut attached = resume.and_then(|cb| ctx.engine.callbacks().attach(&cb));
    let mut act = match &attached {
        Some((record, _)) => Act::resumed(ctx, &node, record.enactment_id.clone()),
        None => {
            let act = Act::new(ctx, &node);
            let verdict = ctx
                .engine
                .vote(
                    &ctx.cell,
                    Topic::Activity,
                    "syncing_before",
                    act.content(json!({})),
                )
                .await;
            apply_values(ctx, &verdict).await;
            if verdict.blocked || verdict.stops() {
                stop_instance(ctx).await;
                return Flow::Halt(Position::at(id));
            }
            if verdict.skips() {
                return Flow::Continue;
            }
            act
        }
    };
    let mut retries = 0;
    loop {
        let result = match attached.take() {
            Some((record, rx)) => await_answers(ctx, &node, &act, record.callback_id, rx).await,
            None => attempt(ctx, &node, &act).await,
        };
        let failure = match result {
            Attempt::Done => {
                act.finish(ctx);
                break;
            }
            Attempt::Halt(p) => return Flow::Halt(p),
            Attempt::Failed(f) => f,
        };
        act.emit(
            ctx,
            ActivityState::Failed,
            json!({"error": failure.message, "salvage": failure.salvage}),
        );
        let verdict = rescue(ctx, &node, &failure).await;
        act.finish(ctx);
        match verdict {
            Rescue::Ignore => break,
            Rescue::Retry if retries < ctx.engine.config().max_retries => {
                retries += 1;
                let mut stop = ctx.unit.stop_signal();
                tokio::select! {
                    _ = tokio::time::sleep(ctx.engine.config().retry_delay) => {}
                    _ = stop.wait_for(|s| *s) => {}
                }
                if ctx.unit.is_stopping() {
                    return Flow::Halt(Position::at(id));
                }
                act = Act::new(ctx, &node);
            }
            _ => {
                stop_instance(ctx).await;
                return Flow::Halt(Position::at(id));
            }
        }
    }
    let verdict = ctx
        .engine
        .vote(
            &ctx.cell,
            Topic::Activity,
            "syncing_after",
            act.content(json!({})),
        )
        .await;
    apply_values(ctx, &verdict).await;
    if verdict.blocked || verdict.stops() {
        stop_instance(ctx).await;
        return Flow::Halt(Position::after(id));
    }
    Flow::Continue
}

async fn rescue(ctx: &Ctx, node: &Node, failure: &Failure) -> Rescue {
    match &node.scripts.rescue {
        Some(source) => {
            match run_permanent(ctx, source, ScriptKind::Rescue, &failure.as_value()).await {
                Ok(Some(Status { code: 0, .. })) => Rescue::Ignore,
                Ok(Some(Status { code: 1, .. })) => Rescue::Retry,
                _ => Rescue::Stop,
            }
        }
        None if failure.salvage => Rescue::Retry,
        None => Rescue::Stop,
    }
}

/// One invocation attempt up to its final answer.
async fn attempt(ctx: &Ctx, node: &Node, act: &Act) -> Attempt {
    let (mut data, mut endpoints) = {
        let d = ctx.cell.lock();
        (d.dataelements.clone(), d.endpoints.clone())
    };
    let mut problem = None;
    if let Some(source) = &node.scripts.prepare {
        match eval_script(
            source,
            &ScriptContext::new(&data, &endpoints),
            ScriptKind::Prepare,
        ) {
            Ok(out) => {
                out.endpoint_changes.apply_to(&mut endpoints);
                data = out.dataelements;
            }
            Err(e) => problem = Some(Failure::script(ScriptKind::Prepare, &e)),
        }
    }
    let params = node.parameters.clone().unwrap_or_default();
    let mut arguments = Map::new();
    if problem.is_none() {
        let sctx = ScriptContext::new(&data, &endpoints);
        for (name, source) in &params.arguments {
            match Expression::parse(source).and_then(|e| e.value(&sctx)) {
                Ok(v) => {
                    arguments.insert(name.clone(), v);
                }
                Err(e) => {
                    problem = Some(Failure::new(format!("argument {name}: {e}")));
                    break;
                }
            }
        }
    }
    let key = node.endpoint_key.clone().unwrap_or_default();
    let url = endpoints.get(&key).cloned();
    act.emit(
        ctx,
        ActivityState::Calling,
        json!({"endpoint": url, "method": params.method, "arguments": arguments}),
    );
    if let Some(f) = problem {
        return Attempt::Failed(f);
    }
    let Some(url) = url else {
        return Attempt::Failed(Failure::new(format!("endpoint {key} is not defined")));
    };

    let engine = &ctx.engine;
    let config = engine.config();
    let record = CallbackRecord::new(ctx.cell.id, &act.id, &act.enactment);
    let callback_id = record.callback_id.clone();
    let rx = engine.callbacks().register(record);
    let ictx = InvocationContext {
        base: config.base_url.clone(),
        instance: ctx.cell.id,
        instance_url: config.instance_url(ctx.cell.id),
        instance_uuid: ctx.cell.uuid,
        callback_url: config.callback_url(ctx.cell.id, &callback_id),
        callback_id: callback_id.clone(),
        activity: act.id.clone(),
        label: act.label.clone(),
        enactment: act.enactment.clone(),
    };
    let outcome = invoke(
        &engine.inner.http,
        &params.method,
        &url,
        &Value::Object(arguments),
        &ictx,
        config.call_timeout,
    )
    .await;
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            engine.callbacks().remove(&callback_id);
            return Attempt::Failed(Failure::new(e.to_string()));
        }
    };
    if let Some(child) = &outcome.instantiation {
        ctx.cell.lock().spawned.push(child.clone());
        act.task_event(ctx, "instantiation", json!({"url": child}));
    }
    for name in &outcome.events {
        act.task_event(ctx, name, Value::Null);
    }
    match outcome.pattern {
        Pattern::Synchronous(payload) => {
            engine.callbacks().remove(&callback_id);
            match receive(ctx, node, act, &payload, false).await {
                Ok(()) => Attempt::Done,
                Err(f) => Attempt::Failed(f),
            }
        }
        Pattern::Asynchronous => await_answers(ctx, node, act, callback_id, rx).await,
        Pattern::Salvageable => {
            engine.callbacks().remove(&callback_id);
            Attempt::Failed(Failure {
                message: "service asked to retry later".into(),
                salvage: true,
                detail: Value::Null,
            })
        }
    }
}

/// Handles one answer: receiving, manipulating and the script for it.
async fn receive(
    ctx: &Ctx,
    node: &Node,
    act: &Act,
    payload: &Payload,
    update: bool,
) -> Result<(), Failure> {
    let value = payload.to_value();
    act.emit(
        ctx,
        ActivityState::Receiving,
        json!({"received": value, "update": update}),
    );
    act.emit(ctx, ActivityState::Manipulating, json!({}));
    let (kind, script) = if update {
        (ScriptKind::Update, &node.scripts.update)
    } else {
        (ScriptKind::Finalize, &node.scripts.finalize)
    };
    if let Some(source) = script {
        run_permanent(ctx, source, kind, &value)
            .await
            .map_err(|e| Failure::script(kind, &e))?;
    }
    Ok(())
}

async fn stopped(mut rx: watch::Receiver<bool>) {
    let _ = rx.wait_for(|s| *s).await;
}

/// Waits for PUTs to the callback URL. A stop request detaches the
/// enactment; its answers queue up until the instance runs again.
async fn await_answers(
    ctx: &Ctx,
    node: &Node,
    act: &Act,
    callback_id: String,
    mut rx: mpsc::UnboundedReceiver<CallbackMessage>,
) -> Attempt {
    let callbacks = ctx.engine.callbacks();
    loop {
        let msg = tokio::select! {
            biased;
            _ = stopped(ctx.unit.stop_signal()) => {
                callbacks.park(&callback_id, rx);
                let mut p = Position::at(act.id.clone());
                p.passthrough = Some(callback_id);
                return Attempt::Halt(p);
            }
            msg = rx.recv() => msg,
        };
        let Some(msg) = msg else {
            return Attempt::Halt(Position::at(act.id.clone()));
        };
        for name in &msg.events {
            act.task_event(ctx, name, msg.payload.to_value());
        }
        if msg.is_failure() {
            callbacks.remove(&callback_id);
            let detail = msg.payload.to_value();
            let message = detail
                .get("title")
                .or_else(|| detail.get("detail"))
                .and_then(Value::as_str)
                .unwrap_or("service reported a failure")
                .to_string();
            return Attempt::Failed(Failure {
                message,
                salvage: false,
                detail,
            });
        }
        match receive(ctx, node, act, &msg.payload, msg.update).await {
            Err(f) => {
                callbacks.remove(&callback_id);
                return Attempt::Failed(f);
            }
            Ok(()) if !msg.update => {
                callbacks.remove(&callback_id);
                return Attempt::Done;
            }
            Ok(()) => {}
        }
    }
}

/// Enacts a script-only activity.
pub(super) async fn manipulate(ctx: &Ctx, id: &str) -> Flow {
    let node = ctx.plan.node(id).expect("compiled node").clone();
    let act = Act::new(ctx, &node);
    act.emit(ctx, ActivityState::Manipulating, json!({}));
    if let Some(source) = &node.scripts.finalize {
        if let Err(e) = run_permanent(ctx, source, ScriptKind::Finalize, &Value::Null).await {
            act.emit(
                ctx,
                ActivityState::Failed,
                json!({"error": Failure::script(ScriptKind::Finalize, &e).message}),
            );
            act.finish(ctx);
            stop_instance(ctx).await;
            return Flow::Halt(Position::at(id));
        }
    }
    act.finish(ctx);
    Flow::Continue
}

/// Evaluates a branch or loop condition. `None` means the instance stops.
pub(super) async fn condition(
    ctx: &Ctx,
    node: &str,
    source: &str,
    expr: &Expression,
) -> Option<bool> {
    let (data, endpoints) = {
        let d = ctx.cell.lock();
        (d.dataelements.clone(), d.endpoints.clone())
    };
    let outcome = expr.test(&ScriptContext::new(&data, &endpoints));
    let out = match outcome {
        Ok(out) => out,
        Err(e) => {
            ctx.engine.emit(
                &ctx.cell,
                Topic::Condition,
                "eval",
                json!({"node": node, "condition": source, "error": e.to_string()}),
            );
            stop_instance(ctx).await;
            return None;
        }
    };
    let read: BTreeMap<String, Value> = out
        .reads
        .iter()
        .map(|k| (k.clone(), data.get(k).cloned().unwrap_or(Value::Null)))
        .collect();
    let mut result = out.value.unwrap_or(false);
    let content = |result: bool| json!({"node": node, "condition": source, "dataelements": read, "result": result});
    let verdict = ctx
        .engine
        .vote(&ctx.cell, Topic::Condition, "eval", content(result))
        .await;
    if verdict.blocked || verdict.stops() {
        ctx.engine
            .emit(&ctx.cell, Topic::Condition, "eval", content(result));
        stop_instance(ctx).await;
        return None;
    }
    if let Some(v) = verdict.condition_value() {
        result = v;
    }
    ctx.engine
        .emit(&ctx.cell, Topic::Condition, "eval", content(result));
    Some(result)
}
