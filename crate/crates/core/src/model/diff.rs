//! Node-level change sets between two models.
//!
//! A node's content is everything but its children. Structure is carried by
//! `parent` and `after` (the preceding sibling in the new model). Retained
//! siblings that keep their relative order stay untouched; everything else
//! that moved is reported as modified.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    InvocationParameters, LoopMode, ModelError, Node, NodeKind, ProcessModel, Scripts,
    ValidationIssue, Wait,
};
use crate::delta::Delta;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeContent {
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameters: Option<InvocationParameters>,
    #[serde(default, skip_serializing_if = "Scripts::is_empty")]
    pub scripts: Scripts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loop_mode: Option<LoopMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wait: Option<Wait>,
}

impl NodeContent {
    fn of(node: &Node) -> Self {
        NodeContent {
            kind: node.kind,
            label: node.label.clone(),
            endpoint_key: node.endpoint_key.clone(),
            parameters: node.parameters.clone(),
            scripts: node.scripts.clone(),
            condition: node.condition.clone(),
            loop_mode: node.loop_mode,
            wait: node.wait,
        }
    }

    fn into_node(self, id: String, children: Vec<Node>) -> Node {
        Node {
            id,
            kind: self.kind,
            label: self.label,
            children,
            endpoint_key: self.endpoint_key,
            parameters: self.parameters,
            scripts: self.scripts,
            condition: self.condition,
            loop_mode: self.loop_mode,
            wait: self.wait,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeChange {
    pub id: String,
    pub content: NodeContent,
    pub parent: Option<String>,
    pub after: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChangeSet {
    pub inserted: Vec<NodeChange>,
    pub deleted: Vec<String>,
    pub modified: Vec<NodeChange>,
    #[serde(default)]
    pub endpoints: Delta<String>,
    #[serde(default)]
    pub dataelements: Delta<Value>,
    #[serde(default)]
    pub attributes: Delta<String>,
}

impl ChangeSet {
    pub fn is_empty(&self) -> bool {
        self.inserted.is_empty()
            && self.deleted.is_empty()
            && self.modified.is_empty()
            && self.endpoints.is_empty()
            && self.dataelements.is_empty()
            && self.attributes.is_empty()
    }

    pub fn inserted_ids(&self) -> Vec<&str> {
        self.inserted.iter().map(|c| c.id.as_str()).collect()
    }

    pub fn modified_ids(&self) -> Vec<&str> {
        self.modified.iter().map(|c| c.id.as_str()).collect()
    }
}

struct Flat<'a> {
    content: HashMap<&'a str, &'a Node>,
    parent: HashMap<&'a str, Option<&'a str>>,
    children: HashMap<&'a str, Vec<&'a str>>,
    order: Vec<&'a str>,
}

fn flatten(root: &Node) -> Flat<'_> {
    let mut flat = Flat {
        content: HashMap::new(),
        parent: HashMap::new(),
        children: HashMap::new(),
        order: Vec::new(),
    };
    fn visit<'a>(node: &'a Node, parent: Option<&'a str>, flat: &mut Flat<'a>) {
        flat.order.push(&node.id);
        flat.content.insert(&node.id, node);
        flat.parent.insert(&node.id, parent);
        flat.children.insert(
            &node.id,
            node.children.iter().map(|c| c.id.as_str()).collect(),
        );
        for child in &node.children {
            visit(child, Some(&node.id), flat);
        }
    }
    visit(root, None, &mut flat);
    flat
}

/// Indices (into `seq`) of one longest strictly increasing subsequence.
fn longest_increasing(seq: &[usize]) -> Vec<usize> {
    let mut tails: Vec<usize> = Vec::new();
    let mut prev = vec![usize::MAX; seq.len()];
    for (i, &v) in seq.iter().enumerate() {
        let pos = tails.partition_point(|&t| seq[t] < v);
        if pos > 0 {
            prev[i] = tails[pos - 1];
        }
        if pos == tails.len() {
            tails.push(i);
        } else {
            tails[pos] = i;
        }
    }
    let mut out = Vec::with_capacity(tails.len());
    let mut cur = tails.last().copied();
    while let Some(i) = cur {
        out.push(i);
        cur = (prev[i] != usize::MAX).then(|| prev[i]);
    }
    out.reverse();
    out
}

pub fn diff_models(old: &ProcessModel, new: &ProcessModel) -> ChangeSet {
    let o = flatten(&old.root);
    let n = flatten(&new.root);

    let deleted: Vec<String> = o
        .order
        .iter()
        .filter(|id| !n.content.contains_key(*id))
        .map(|id| id.to_string())
        .collect();

    // retained nodes whose sibling order must be re-established
    let mut moved: HashSet<&str> = HashSet::new();
    for &parent in &n.order {
        let siblings = &n.children[parent];
        let kept: Vec<&str> = siblings
            .iter()
            .copied()
            .filter(|c| o.parent.get(c).copied().flatten() == Some(parent))
            .collect();
        let old_siblings = o
            .children
            .get(parent)
            .map(Vec::as_slice)
            .unwrap_or_default();
        let old_index: Vec<usize> = kept
            .iter()
            .map(|c| {
                old_siblings
                    .iter()
                    .position(|s| s == c)
                    .expect("kept child is in old parent")
            })
            .collect();
        let stable = longest_increasing(&old_index);
        for (i, c) in kept.iter().enumerate() {
            if stable.binary_search(&i).is_err() {
                moved.insert(c);
            }
        }
        for &c in siblings {
            if o.content.contains_key(c) && o.parent[c] != Some(parent) {
                moved.insert(c);
            }
        }
    }
    if o.content.contains_key(new.root.id.as_str()) && o.parent[new.root.id.as_str()].is_some() {
        moved.insert(&new.root.id);
    }

    let mut inserted = Vec::new();
    let mut modified = Vec::new();
    for &id in &n.order {
        let node = n.content[id];
        let parent = n.parent[id];
        let after = parent.and_then(|p| {
            let sib = &n.children[p];
            let i = sib
                .iter()
                .position(|s| *s == id)
                .expect("child listed under its parent");
            (i > 0).then(|| sib[i - 1].to_string())
        });
        let change = || NodeChange {
            id: id.to_string(),
            content: NodeContent::of(node),
            parent: parent.map(str::to_string),
            after: after.clone(),
        };
        match o.content.get(id) {
            None => inserted.push(change()),
            Some(old_node) => {
                if moved.contains(id) || NodeContent::of(old_node) != NodeContent::of(node) {
                    modified.push(change());
                }
            }
        }
    }

    ChangeSet {
        inserted,
        deleted,
        modified,
        endpoints: Delta::between(&old.endpoints, &new.endpoints),
        dataelements: Delta::between(&old.dataelements, &new.dataelements),
        attributes: Delta::between(&old.attributes, &new.attributes),
    }
}

fn mismatch(message: impl Into<String>) -> ModelError {
    ModelError::Invalid(vec![ValidationIssue {
        path: String::new(),
        node_id: None,
        message: message.into(),
    }])
}

/// Applies a change set produced by [`diff_models`] to `base`.
pub fn apply_changes(changes: &ChangeSet, base: &ProcessModel) -> Result<ProcessModel, ModelError> {
    let flat = flatten(&base.root);
    let mut content: HashMap<String, NodeContent> = flat
        .content
        .iter()
        .map(|(id, n)| (id.to_string(), NodeContent::of(n)))
        .collect();
    let mut children: HashMap<String, Vec<String>> = flat
        .children
        .iter()
        .map(|(id, c)| (id.to_string(), c.iter().map(|s| s.to_string()).collect()))
        .collect();
    let mut parent: HashMap<String, Option<String>> = flat
        .parent
        .iter()
        .map(|(id, p)| (id.to_string(), p.map(str::to_string)))
        .collect();

    let detach = |id: &str,
                  parent: &mut HashMap<String, Option<String>>,
                  children: &mut HashMap<String, Vec<String>>| {
        if let Some(Some(p)) = parent.remove(id) {
            if let Some(list) = children.get_mut(&p) {
                list.retain(|c| c != id);
            }
        }
    };

    for id in &changes.deleted {
        if content.remove(id).is_none() {
            return Err(mismatch(format!("deleted node \"{id}\" does not exist")));
        }
        detach(id, &mut parent, &mut children);
        children.remove(id);
    }
    for change in &changes.modified {
        if !content.contains_key(&change.id) {
            return Err(mismatch(format!(
                "modified node \"{}\" does not exist",
                change.id
            )));
        }
        detach(&change.id, &mut parent, &mut children);
        content.insert(change.id.clone(), change.content.clone());
    }
    for change in &changes.inserted {
        if content
            .insert(change.id.clone(), change.content.clone())
            .is_some()
        {
            return Err(mismatch(format!(
                "inserted node \"{}\" already exists",
                change.id
            )));
        }
        children.insert(change.id.clone(), Vec::new());
    }

    // place every detached node once its parent and predecessor are placed
    let mut pending: Vec<&NodeChange> = changes.modified.iter().chain(&changes.inserted).collect();
    while !pending.is_empty() {
        let before = pending.len();
        pending.retain(|change| {
            let parent_ready = match &change.parent {
                None => true,
                Some(p) => parent.contains_key(p),
            };
            let after_ready = change.after.as_ref().is_none_or(|a| parent.contains_key(a));
            if !(parent_ready && after_ready) {
                return true;
            }
            if let Some(p) = &change.parent {
                let list = children.get_mut(p).expect("parent readiness checked");
                let at = match &change.after {
                    None => 0,
                    Some(a) => match list.iter().position(|c| c == a) {
                        Some(i) => i + 1,
                        None => return true,
                    },
                };
                list.insert(at, change.id.clone());
            }
            parent.insert(change.id.clone(), change.parent.clone());
            false
        });
        if pending.len() == before {
            return Err(mismatch(
                "change set structure does not apply to this model",
            ));
        }
    }

    let roots: Vec<&String> = parent
        .iter()
        .filter(|(_, p)| p.is_none())
        .map(|(id, _)| id)
        .collect();
    let [root] = roots.as_slice() else {
        return Err(mismatch("change set leaves no single root"));
    };

    fn build(
        id: &str,
        content: &mut HashMap<String, NodeContent>,
        children: &HashMap<String, Vec<String>>,
    ) -> Option<Node> {
        let kids = children.get(id).map(Vec::as_slice).unwrap_or_default();
        let built: Option<Vec<Node>> = kids.iter().map(|c| build(c, content, children)).collect();
        Some(content.remove(id)?.into_node(id.to_string(), built?))
    }
    let root_id = (*root).clone();
    let root = build(&root_id, &mut content, &children)
        .ok_or_else(|| mismatch("dangling node reference"))?;
    if !content.is_empty() {
        return Err(mismatch("change set leaves unreachable nodes"));
    }

    let mut model = ProcessModel {
        root,
        ..base.clone()
    };
    changes.endpoints.apply_to(&mut model.endpoints);
    changes.dataelements.apply_to(&mut model.dataelements);
    changes.attributes.apply_to(&mut model.attributes);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn base() -> ProcessModel {
        ProcessModel {
            root: Node::sequence(
                "root",
                vec![Node::call("a1", "machine"), Node::call("a3", "machine")],
            ),
            endpoints: BTreeMap::from([("machine".into(), "http://m1/".into())]),
            ..ProcessModel::empty()
        }
    }

    #[test]
    fn identical_models_give_empty_changeset() {
        assert!(diff_models(&base(), &base()).is_empty());
    }

    #[test]
    fn one_extra_call_is_an_insert() {
        let mut new = base();
        new.root.children.insert(1, Node::call("a2", "machine"));
        let cs = diff_models(&base(), &new);
        assert_eq!(cs.inserted_ids(), vec!["a2"]);
        assert!(cs.modified.is_empty() && cs.deleted.is_empty());
        assert_eq!(apply_changes(&cs, &base()).unwrap(), new);
    }

    #[test]
    fn endpoint_reassignment_is_a_modification() {
        let mut new = base();
        new.root.children[0].endpoint_key = Some("other".into());
        let cs = diff_models(&base(), &new);
        assert_eq!(cs.modified_ids(), vec!["a1"]);
        assert_eq!(apply_changes(&cs, &base()).unwrap(), new);
    }

    #[test]
    fn rotation_is_reproduced() {
        let ids = ["a", "b", "c", "d"];
        let old = ProcessModel {
            root: Node::sequence("root", ids.iter().map(|i| Node::call(*i, "k")).collect()),
            ..ProcessModel::empty()
        };
        let new = ProcessModel {
            root: Node::sequence(
                "root",
                ["c", "d", "a", "b"]
                    .iter()
                    .map(|i| Node::call(*i, "k"))
                    .collect(),
            ),
            ..ProcessModel::empty()
        };
        let cs = diff_models(&old, &new);
        assert_eq!(cs.modified.len(), 2);
        assert_eq!(apply_changes(&cs, &old).unwrap(), new);
    }

    #[test]
    fn unrelated_base_is_rejected() {
        let mut new = base();
        new.root.children.push(Node::call("a9", "machine"));
        let cs = diff_models(&base(), &new);
        let other = ProcessModel {
            root: Node::sequence("root", vec![Node::call("a9", "x")]),
            ..ProcessModel::empty()
        };
        assert!(apply_changes(&cs, &other).is_err());
    }
}
