//! Dependency-tree reordering.
//!
//! Sentences are rewritten as a sequence of blocks, one per token that has
//! dependents: the head followed by its direct children in surface order.
//! Blocks are read breadth-first from the root and separated by `N - 1` pad
//! tokens, so no width-`N` convolution window covers two blocks.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;

use thiserror::Error;

use crate::trajectory::{Sentence, Tag, Trajectory, PAD_TOKEN};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DepError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("sentence ending at line {line}: {message}")]
    NotATree { line: usize, message: String },
    #[error("{0}")]
    InvalidTree(String),
    #[error("io error: {0}")]
    Io(String),
}

/// Dependency parse of one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepTree {
    tokens: Vec<String>,
    heads: Vec<Option<usize>>,
    root: usize,
}

impl DepTree {
    /// `heads[i]` is the 0-based head of token `i`, `None` for the root.
    pub fn new(tokens: Vec<String>, heads: Vec<Option<usize>>) -> Result<Self, DepError> {
        if tokens.len() != heads.len() {
            return Err(DepError::InvalidTree(format!(
                "{} tokens but {} heads",
                tokens.len(),
                heads.len()
            )));
        }
        if tokens.is_empty() {
            return Err(DepError::InvalidTree("empty sentence".into()));
        }
        let roots: Vec<usize> = (0..heads.len()).filter(|&i| heads[i].is_none()).collect();
        if roots.len() != 1 {
            return Err(DepError::InvalidTree(format!("expected one root, found {}", roots.len())));
        }
        for (i, h) in heads.iter().enumerate() {
            if let Some(h) = *h {
                if h >= tokens.len() {
                    return Err(DepError::InvalidTree(format!("token {} has head {} out of range", i + 1, h + 1)));
                }
            }
        }
        // Every token must reach the root without revisiting a node.
        for start in 0..heads.len() {
            let mut cur = start;
            let mut steps = 0;
            while let Some(h) = heads[cur] {
                cur = h;
                steps += 1;
                if steps > heads.len() {
                    return Err(DepError::InvalidTree(format!("cycle through token {}", start + 1)));
                }
            }
        }
        Ok(Self {
            tokens,
            heads,
            root: roots[0],
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn head(&self, i: usize) -> Option<usize> {
        self.heads[i]
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn children(&self, node: usize) -> Vec<usize> {
        (0..self.heads.len()).filter(|&i| self.heads[i] == Some(node)).collect()
    }

    /// Lookup key: lowercased forms joined by single spaces.
    pub fn key(&self) -> String {
        self.tokens.iter().map(|t| t.to_lowercase()).collect::<Vec<_>>().join(" ")
    }
}

/// A head token and its direct dependents in surface order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub head: String,
    pub children: Vec<String>,
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.head)?;
        for c in &self.children {
            write!(f, " {c}")?;
        }
        Ok(())
    }
}

/// Blocks of every token with dependents, level by level from the root;
/// within one depth, heads are taken in surface order.
pub fn blocks_from_tree(tree: &DepTree) -> Vec<Block> {
    let mut blocks = Vec::new();
    let mut level = vec![tree.root];
    while !level.is_empty() {
        level.sort_unstable();
        let mut next = Vec::new();
        for &head in &level {
            let children = tree.children(head);
            if !children.is_empty() {
                blocks.push(Block {
                    head: tree.tokens[head].clone(),
                    children: children.iter().map(|&c| tree.tokens[c].clone()).collect(),
                });
            }
            next.extend(children);
        }
        level = next;
    }
    blocks
}

/// Flatten blocks head-first, with `width - 1` copies of `pad` between
/// consecutive blocks.
pub fn reorder_with_padding(blocks: &[Block], pad: &str, width: usize) -> Vec<String> {
    assert!(width >= 1, "kernel width must be positive");
    let mut out = Vec::new();
    for (i, b) in blocks.iter().enumerate() {
        if i > 0 {
            out.extend(std::iter::repeat_n(pad.to_string(), width - 1));
        }
        out.push(b.head.clone());
        out.extend(b.children.iter().cloned());
    }
    out
}

/// Reordered form of one tree. A tree without dependents (a single token)
/// reads as itself.
pub fn reorder_tree(tree: &DepTree, pad: &str, width: usize) -> Vec<String> {
    let blocks = blocks_from_tree(tree);
    if blocks.is_empty() {
        return tree.tokens.clone();
    }
    reorder_with_padding(&blocks, pad, width)
}

/// Parse CoNLL-U text. Only the ID, FORM and HEAD columns are used;
/// multiword ranges (`1-2`) and empty nodes (`1.1`) are skipped.
pub fn read_conllu(reader: impl BufRead) -> Result<Vec<DepTree>, DepError> {
    let mut trees = Vec::new();
    let mut forms: Vec<String> = Vec::new();
    let mut heads: Vec<Option<usize>> = Vec::new();
    let mut raw_heads: Vec<(usize, usize)> = Vec::new();
    let mut last_line = 0;

    let mut finish = |forms: &mut Vec<String>, heads: &mut Vec<Option<usize>>, raw: &mut Vec<(usize, usize)>, line: usize| -> Result<(), DepError> {
        if forms.is_empty() {
            return Ok(());
        }
        for &(head, at) in raw.iter() {
            if head > forms.len() {
                return Err(DepError::Malformed {
                    line: at,
                    message: format!("head {head} beyond sentence length {}", forms.len()),
                });
            }
        }
        let tree = DepTree::new(std::mem::take(forms), std::mem::take(heads))
            .map_err(|e| DepError::NotATree { line, message: e.to_string() })?;
        raw.clear();
        trees.push(tree);
        Ok(())
    };

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        last_line = lineno;
        let line = line.map_err(|e| DepError::Io(e.to_string()))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            finish(&mut forms, &mut heads, &mut raw_heads, lineno)?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(DepError::Malformed {
                line: lineno,
                message: format!("expected 10 tab-separated columns, found {}", cols.len()),
            });
        }
        let id = cols[0];
        if id.contains('-') || id.contains('.') {
            continue;
        }
        let id: usize = id.parse().map_err(|_| DepError::Malformed {
            line: lineno,
            message: format!("bad token id {id:?}"),
        })?;
        if id != forms.len() + 1 {
            return Err(DepError::Malformed {
                line: lineno,
                message: format!("token id {id} out of sequence, expected {}", forms.len() + 1),
            });
        }
        let head: usize = cols[6].parse().map_err(|_| DepError::Malformed {
            line: lineno,
            message: format!("bad head {:?}", cols[6]),
        })?;
        if head == id {
            return Err(DepError::Malformed {
                line: lineno,
                message: "token is its own head".into(),
            });
        }
        forms.push(cols[1].to_string());
        heads.push(if head == 0 { None } else { Some(head - 1) });
        raw_heads.push((head, lineno));
    }
    finish(&mut forms, &mut heads, &mut raw_heads, last_line + 1)?;
    Ok(trees)
}

/// Parses available for reordering, looked up by sentence text.
#[derive(Debug, Clone, Default)]
pub struct DepParses {
    by_key: HashMap<String, DepTree>,
}

impl DepParses {
    pub fn new(trees: impl IntoIterator<Item = DepTree>) -> Self {
        let mut by_key = HashMap::new();
        for t in trees {
            by_key.entry(t.key()).or_insert(t);
        }
        Self { by_key }
    }

    pub fn from_conllu(reader: impl BufRead) -> Result<Self, DepError> {
        Ok(Self::new(read_conllu(reader)?))
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    pub fn get(&self, tokens: &[String]) -> Option<&DepTree> {
        self.by_key.get(&tokens.join(" "))
    }

    /// Reorder the sentences of one master. The token stream is cut after
    /// `.`, `!` and `?`; each piece with a parse (with or without its final
    /// punctuation) is replaced by its block form, kept apart from its
    /// neighbours by `width - 1` pads. Returns the tokens unchanged when no
    /// piece has a parse.
    pub fn reorder_tokens(&self, tokens: &[String], width: usize) -> Vec<String> {
        let mut pieces: Vec<(Vec<String>, bool)> = Vec::new();
        let mut changed = false;
        for seg in split_sentences(tokens) {
            if let Some(tree) = self.get(seg) {
                pieces.push((reorder_tree(tree, PAD_TOKEN, width), true));
                changed = true;
            } else if seg.len() > 1 && is_terminal_punct(&seg[seg.len() - 1]) {
                match self.get(&seg[..seg.len() - 1]) {
                    Some(tree) => {
                        pieces.push((reorder_tree(tree, PAD_TOKEN, width), true));
                        pieces.push((vec![seg[seg.len() - 1].clone()], true));
                        changed = true;
                    }
                    None => pieces.push((seg.to_vec(), false)),
                }
            } else {
                pieces.push((seg.to_vec(), false));
            }
        }
        if !changed {
            return tokens.to_vec();
        }
        let mut out = Vec::with_capacity(tokens.len() * 2);
        let mut prev_reordered = false;
        for (i, (piece, reordered)) in pieces.into_iter().enumerate() {
            if i > 0 && (reordered || prev_reordered) {
                out.extend(std::iter::repeat_n(PAD_TOKEN.to_string(), width - 1));
            }
            out.extend(piece);
            prev_reordered = reordered;
        }
        out
    }
}

fn is_terminal_punct(t: &str) -> bool {
    matches!(t, "." | "!" | "?")
}

fn split_sentences(tokens: &[String]) -> Vec<&[String]> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if is_terminal_punct(t) {
            out.push(&tokens[start..=i]);
            start = i + 1;
        }
    }
    if start < tokens.len() {
        out.push(&tokens[start..]);
    }
    out
}

/// Replace every master sentence that has a parse by its reordered form.
/// Actions pass through untouched.
pub fn reorder_trajectory(traj: &Trajectory, parses: &DepParses, width: usize) -> Trajectory {
    traj.map_sentences(|s| match s.tag {
        Tag::Action => s.clone(),
        Tag::Master => Sentence {
            tag: Tag::Master,
            tokens: parses.reorder_tokens(&s.tokens, width),
        },
    })
}
