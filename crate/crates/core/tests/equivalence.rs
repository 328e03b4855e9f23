//! The compiled plan must behave like a direct walk of the model tree.

use std::time::Duration;

use futures::future::join_all;
use pf_core::config::EngineConfig;
use pf_testkit::{
    activity_sequences, matches_enactment_grammar, run_to_end, serve_engine, GenOptions, Generated,
    ScriptedServices,
};

const MODELS: u64 = 200;

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn plan_matches_tree_interpreter() {
    let services = ScriptedServices::start().await;
    let engine = serve_engine(EngineConfig::default()).await;
    let opts = GenOptions::default();
    let mut failures = Vec::new();
    for chunk in (0..MODELS).collect::<Vec<_>>().chunks(20) {
        let runs = chunk.iter().map(|seed| {
            let g = Generated::new(*seed, &opts);
            let engine = engine.clone();
            let model = g.to_model(&services);
            async move {
                (
                    g,
                    run_to_end(&engine, model, Duration::from_secs(30))
                        .await
                        .unwrap(),
                )
            }
        });
        for (g, run) in join_all(runs).await {
            if run.final_state.as_deref() != Some("finished") {
                failures.push(format!("seed {}: ended {:?}", g.seed, run.final_state));
                continue;
            }
            let mut expected = g.expected_trace();
            let mut actual = run.trace();
            if g.has_parallel() {
                expected.sort();
                actual.sort();
            }
            if expected != actual {
                failures.push(format!(
                    "seed {}:\n expected {expected:?}\n actual   {actual:?}",
                    g.seed
                ));
            }
            let updates = g.updates();
            for (enactment, (activity, seq)) in activity_sequences(&run.events) {
                let ok = match updates.get(&activity) {
                    Some(n) => {
                        matches_enactment_grammar(&seq)
                            && seq.iter().filter(|e| *e == "receiving").count() == *n as usize + 1
                    }
                    None => seq == ["manipulating", "status", "done"],
                };
                if !ok {
                    failures.push(format!("seed {}: {enactment} {seq:?}", g.seed));
                }
            }
        }
    }
    assert!(
        failures.is_empty(),
        "{} mismatches:\n{}",
        failures.len(),
        failures.join("\n")
    );
}
