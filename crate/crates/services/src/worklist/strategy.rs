use std::collections::{BTreeMap, HashMap};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Members of a role in turn.
    RoundRobin,
    /// Whoever has the fewest open tasks; ties broken by a seeded coin.
    Workload,
    /// Best dot product of required and offered skills.
    SkillBased,
}

pub type Skills = BTreeMap<String, f64>;

pub fn skill_score(required: &Skills, offered: Option<&Skills>) -> f64 {
    required
        .iter()
        .map(|(k, need)| need * offered.and_then(|o| o.get(k)).copied().unwrap_or(0.0))
        .sum()
}

/// Picks users for tasks. Deterministic for a given seed and call order.
#[derive(Debug, Clone)]
pub struct Assigner {
    kind: StrategyKind,
    rng: ChaCha8Rng,
    cursors: HashMap<String, usize>,
}

impl Assigner {
    pub fn new(kind: StrategyKind, seed: u64) -> Self {
        Assigner {
            kind,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cursors: HashMap::new(),
        }
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    /// `members` in role order; `eligible` filters them; `load` counts open
    /// tasks per user.
    pub fn pick(
        &mut self,
        role: &str,
        members: &[String],
        eligible: impl Fn(&str) -> bool,
        load: impl Fn(&str) -> usize,
        required: &Skills,
        skills: &BTreeMap<String, Skills>,
    ) -> Option<String> {
        let candidates: Vec<&String> = members.iter().filter(|m| eligible(m)).collect();
        if candidates.is_empty() {
            return None;
        }
        match self.kind {
            StrategyKind::RoundRobin => {
                let cursor = self.cursors.entry(role.to_string()).or_insert(0);
                for step in 0..members.len() {
                    let i = (*cursor + step) % members.len();
                    if eligible(&members[i]) {
                        *cursor = i + 1;
                        return Some(members[i].clone());
                    }
                }
                None
            }
            StrategyKind::Workload => {
                let min = candidates.iter().map(|c| load(c)).min()?;
                let tied: Vec<&String> =
                    candidates.into_iter().filter(|c| load(c) == min).collect();
                tied.choose(&mut self.rng).map(|s| s.to_string())
            }
            StrategyKind::SkillBased => {
                let mut best: Option<(&String, f64)> = None;
                for c in candidates {
                    let score = skill_score(required, skills.get(c.as_str()));
                    if best.is_none_or(|(_, b)| score > b) {
                        best = Some((c, score));
                    }
                }
                best.map(|(c, _)| c.clone())
            }
        }
    }
}
