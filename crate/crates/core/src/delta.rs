//! Added / deleted / changed(from, to) deltas over keyed maps.
//!
//! The same shape is used for change events on the dataelements, endpoints
//! and attributes topics, for PATCH bodies and for model change sets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Change<V> {
    pub from: V,
    pub to: V,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "V: Serialize", deserialize = "V: Deserialize<'de>"))]
pub struct Delta<V> {
    #[serde(default)]
    pub added: BTreeMap<String, V>,
    #[serde(default)]
    pub deleted: BTreeMap<String, V>,
    #[serde(default)]
    pub changed: BTreeMap<String, Change<V>>,
}

impl<V> Default for Delta<V> {
    fn default() -> Self {
        Delta {
            added: BTreeMap::new(),
            deleted: BTreeMap::new(),
            changed: BTreeMap::new(),
        }
    }
}

impl<V: Clone + PartialEq> Delta<V> {
    pub fn between(old: &BTreeMap<String, V>, new: &BTreeMap<String, V>) -> Self {
        let mut delta = Delta::default();
        for (k, v) in old {
            match new.get(k) {
                None => {
                    delta.deleted.insert(k.clone(), v.clone());
                }
                Some(n) if n != v => {
                    delta.changed.insert(
                        k.clone(),
                        Change {
                            from: v.clone(),
                            to: n.clone(),
                        },
                    );
                }
                Some(_) => {}
            }
        }
        for (k, v) in new {
            if !old.contains_key(k) {
                delta.added.insert(k.clone(), v.clone());
            }
        }
        delta
    }

    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.deleted.is_empty() && self.changed.is_empty()
    }

    pub fn apply_to(&self, map: &mut BTreeMap<String, V>) {
        for k in self.deleted.keys() {
            map.remove(k);
        }
        for (k, c) in &self.changed {
            map.insert(k.clone(), c.to.clone());
        }
        for (k, v) in &self.added {
            map.insert(k.clone(), v.clone());
        }
    }

    /// Keys touched by this delta, in key order.
    pub fn keys(&self) -> Vec<&str> {
        let mut keys: Vec<&str> = self
            .added
            .keys()
            .chain(self.deleted.keys())
            .chain(self.changed.keys())
            .map(String::as_str)
            .collect();
        keys.sort_unstable();
        keys
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn between_and_apply() {
        let old = BTreeMap::from([("x".to_string(), json!(1)), ("y".to_string(), json!("a"))]);
        let new = BTreeMap::from([("x".to_string(), json!(2)), ("z".to_string(), json!(true))]);
        let d = Delta::between(&old, &new);
        assert_eq!(
            serde_json::to_value(&d).unwrap(),
            json!({"added": {"z": true}, "deleted": {"y": "a"}, "changed": {"x": {"from": 1, "to": 2}}})
        );
        let mut applied = old.clone();
        d.apply_to(&mut applied);
        assert_eq!(applied, new);
        assert!(Delta::between(&new, &new).is_empty());
    }
}
