//! Exact-prefix radix tree over token sequences.
//!
//! Edges carry token runs; no two outgoing edges of a node share a first
//! token. Every node records the handles of the inserted sequences that pass
//! through it, in insertion order, so the witness for a match is the earliest
//! inserted sequence sharing the matched prefix.
//!
//! There is no eviction: the tree grows for the lifetime of one trace replay.

use std::collections::HashMap;

use crate::model::Token;

/// Opaque identifier attached to an inserted sequence.
pub type Handle = u64;

#[derive(Debug, Clone)]
struct Node {
    /// Label of the edge leading into this node.
    label: Vec<Token>,
    children: HashMap<Token, usize>,
    handles: Vec<Handle>,
}

impl Node {
    fn new(label: Vec<Token>) -> Self {
        Self {
            label,
            children: HashMap::new(),
            handles: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefixMatch {
    pub len: usize,
    /// Earliest inserted sequence sharing the first `len` tokens; `None` when
    /// `len == 0`.
    pub witness: Option<Handle>,
}

#[derive(Debug, Clone)]
pub struct RadixTree {
    nodes: Vec<Node>,
    sequences: usize,
}

impl Default for RadixTree {
    fn default() -> Self {
        Self::new()
    }
}

const ROOT: usize = 0;

fn common_prefix(a: &[Token], b: &[Token]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

impl RadixTree {
    pub fn new() -> Self {
        Self {
            nodes: vec![Node::new(Vec::new())],
            sequences: 0,
        }
    }

    /// Number of inserted sequences.
    pub fn len(&self) -> usize {
        self.sequences
    }

    pub fn is_empty(&self) -> bool {
        self.sequences == 0
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Splits the edge into `child` after `at` tokens and returns the new
    /// intermediate node.
    fn split(&mut self, parent: usize, child: usize, at: usize) -> usize {
        let tail = self.nodes[child].label.split_off(at);
        let head = std::mem::replace(&mut self.nodes[child].label, tail);
        let first_tail = self.nodes[child].label[0];
        let first_head = head[0];
        let mut mid = Node::new(head);
        mid.handles = self.nodes[child].handles.clone();
        mid.children.insert(first_tail, child);
        let mid_idx = self.nodes.len();
        self.nodes.push(mid);
        self.nodes[parent].children.insert(first_head, mid_idx);
        mid_idx
    }

    pub fn insert(&mut self, seq: &[Token], handle: Handle) {
        self.sequences += 1;
        let mut node = ROOT;
        self.nodes[ROOT].handles.push(handle);
        let mut rest = seq;
        while !rest.is_empty() {
            let next = self.nodes[node].children.get(&rest[0]).copied();
            match next {
                None => {
                    let mut leaf = Node::new(rest.to_vec());
                    leaf.handles.push(handle);
                    let idx = self.nodes.len();
                    self.nodes.push(leaf);
                    self.nodes[node].children.insert(rest[0], idx);
                    return;
                }
                Some(child) => {
                    let shared = common_prefix(&self.nodes[child].label, rest);
                    let target = if shared < self.nodes[child].label.len() {
                        self.split(node, child, shared)
                    } else {
                        child
                    };
                    self.nodes[target].handles.push(handle);
                    node = target;
                    rest = &rest[shared..];
                }
            }
        }
    }

    pub fn match_prefix(&self, seq: &[Token]) -> PrefixMatch {
        let mut node = ROOT;
        let mut matched = 0;
        let mut witness = None;
        loop {
            let rest = &seq[matched..];
            let Some(&child) = rest.first().and_then(|t| self.nodes[node].children.get(t))
            else {
                break;
            };
            let shared = common_prefix(&self.nodes[child].label, rest);
            matched += shared;
            witness = self.nodes[child].handles.first().copied();
            if shared < self.nodes[child].label.len() {
                break;
            }
            node = child;
        }
        PrefixMatch {
            len: matched,
            witness: if matched == 0 { None } else { witness },
        }
    }
}
