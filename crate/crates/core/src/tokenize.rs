//! Token counting.
//!
//! Servers usually report exact usage, but not always. When they don't, a
//! client-side byte-level BPE table can approximate a model's tokenizer, and
//! as a last resort the byte length divided by four is used. Every count
//! carries the [`TokenSource`] it came from.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TokenizeError {
    #[error("failed to read merge file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `left right`, found {found:?}")]
    Malformed { line: usize, found: String },
    #[error("line {line}: duplicate merge `{left} {right}`")]
    Duplicate { line: usize, left: String, right: String },
    #[error("line {line}: symbol `{symbol}` is neither a single byte nor produced by an earlier merge")]
    Underivable { line: usize, symbol: String },
}

type SymbolId = u32;

#[derive(Debug, Clone, Copy)]
struct Merge {
    rank: u32,
    result: SymbolId,
}

/// An ordered list of byte-level merges. Symbols `0..256` are the single
/// bytes; every merge introduces (or reuses) the symbol formed by
/// concatenating its pair.
#[derive(Debug, Clone)]
pub struct MergeTable {
    name: String,
    symbols: Vec<Vec<u8>>,
    symbol_ids: HashMap<Vec<u8>, SymbolId>,
    merges: HashMap<(SymbolId, SymbolId), Merge>,
    pairs: Vec<(SymbolId, SymbolId)>,
}

impl MergeTable {
    pub fn base(name: impl Into<String>) -> Self {
        let symbols: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let symbol_ids = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as SymbolId))
            .collect();
        Self {
            name: name.into(),
            symbols,
            symbol_ids,
            merges: HashMap::new(),
            pairs: Vec::new(),
        }
    }

    /// Builds a table from merge pairs in rank order.
    pub fn from_pairs<L, R>(name: impl Into<String>, pairs: impl IntoIterator<Item = (L, R)>) -> Result<Self, TokenizeError>
    where
        L: AsRef<[u8]>,
        R: AsRef<[u8]>,
    {
        let mut table = Self::base(name);
        for (i, (l, r)) in pairs.into_iter().enumerate() {
            table.push_merge(i + 1, l.as_ref(), r.as_ref())?;
        }
        Ok(table)
    }

    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self, TokenizeError> {
        let mut table = Self::base(name);
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    table.push_merge(line_no, l.as_bytes(), r.as_bytes())?;
                }
                _ => {
                    return Err(TokenizeError::Malformed {
                        line: line_no,
                        found: line.to_string(),
                    })
                }
            }
        }
        Ok(table)
    }

    fn push_merge(&mut self, line: usize, left: &[u8], right: &[u8]) -> Result<(), TokenizeError> {
        let lookup = |sym: &[u8]| {
            self.symbol_ids.get(sym).copied().ok_or_else(|| TokenizeError::Underivable {
                line,
                symbol: String::from_utf8_lossy(sym).into_owned(),
            })
        };
        let l = lookup(left)?;
        let r = lookup(right)?;
        if self.merges.contains_key(&(l, r)) {
            return Err(TokenizeError::Duplicate {
                line,
                left: String::from_utf8_lossy(left).into_owned(),
                right: String::from_utf8_lossy(right).into_owned(),
            });
        }
        let joined = [left, right].concat();
        let result = match self.symbol_ids.get(&joined) {
            Some(&id) => id,
            None => {
                let id = self.symbols.len() as SymbolId;
                self.symbols.push(joined.clone());
                self.symbol_ids.insert(joined, id);
                id
            }
        };
        let rank = self.pairs.len() as u32;
        self.merges.insert((l, r), Merge { rank, result });
        self.pairs.push((l, r));
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Rank of the merge `(left, right)`, if the table has one.
    pub fn rank(&self, left: &[u8], right: &[u8]) -> Option<u32> {
        let l = self.symbol_ids.get(left)?;
        let r = self.symbol_ids.get(right)?;
        self.merges.get(&(*l, *r)).map(|m| m.rank)
    }

    /// Merge pairs in rank order.
    pub fn pairs(&self) -> impl Iterator<Item = (&[u8], &[u8])> + '_ {
        self.pairs
            .iter()
            .map(|&(l, r)| (self.symbols[l as usize].as_slice(), self.symbols[r as usize].as_slice()))
    }
}

pub fn load_merges(path: &Path) -> Result<MergeTable, TokenizeError> {
    let text = fs::read_to_string(path).map_err(|source| TokenizeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    MergeTable::parse(name, &text)
}

#[derive(Clone, Copy)]
struct Node {
    symbol: SymbolId,
    start: usize,
    prev: Option<usize>,
    next: Option<usize>,
    version: u32,
    alive: bool,
}

/// Segments `text` by repeatedly applying the lowest-ranked merge among all
/// adjacent symbol pairs, leftmost first on ties.
///
/// Pairs live in a min-heap keyed by `(rank, byte offset)`; entries whose
/// nodes changed since they were pushed are discarded when popped.
pub fn bpe_segment<'a>(text: &'a [u8], table: &MergeTable) -> Vec<&'a [u8]> {
    if text.is_empty() {
        return Vec::new();
    }
    let n = text.len();
    let mut nodes: Vec<Node> = (0..n)
        .map(|i| Node {
            symbol: SymbolId::from(text[i]),
            start: i,
            prev: i.checked_sub(1),
            next: if i + 1 < n { Some(i + 1) } else { None },
            version: 0,
            alive: true,
        })
        .collect();

    // (rank, start offset of left node, left index, left version, right index, right version)
    type Entry = Reverse<(u32, usize, usize, u32, usize, u32)>;
    let mut heap: BinaryHeap<Entry> = BinaryHeap::new();
    let push = |heap: &mut BinaryHeap<Entry>, nodes: &[Node], left: usize| {
        if let Some(right) = nodes[left].next {
            if let Some(m) = table.merges.get(&(nodes[left].symbol, nodes[right].symbol)) {
                heap.push(Reverse((
                    m.rank,
                    nodes[left].start,
                    left,
                    nodes[left].version,
                    right,
                    nodes[right].version,
                )));
            }
        }
    };
    for i in 0..n {
        push(&mut heap, &nodes, i);
    }

    while let Some(Reverse((_, _, left, left_ver, right, right_ver))) = heap.pop() {
        let (l, r) = (nodes[left], nodes[right]);
        if !l.alive || !r.alive || l.version != left_ver || r.version != right_ver || l.next != Some(right) {
            continue;
        }
        let merge = table.merges[&(l.symbol, r.symbol)];
        nodes[left].symbol = merge.result;
        nodes[left].version += 1;
        nodes[left].next = r.next;
        nodes[right].alive = false;
        if let Some(after) = r.next {
            nodes[after].prev = Some(left);
        }
        if let Some(before) = l.prev {
            push(&mut heap, &nodes, before);
        }
        push(&mut heap, &nodes, left);
    }

    let mut out = Vec::new();
    let mut cursor = Some(0);
    while let Some(i) = cursor {
        let end = nodes[i].next.map_or(n, |j| nodes[j].start);
        out.push(&text[nodes[i].start..end]);
        cursor = nodes[i].next;
    }
    out
}

pub fn bpe_count(text: &str, table: &MergeTable) -> u64 {
    bpe_segment(text.as_bytes(), table).len() as u64
}

/// `ceil(byte_length / 4)`.
pub fn approx_token_count(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSource {
    ServerUsage,
    ClientBpe,
    Approximate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCountRecord {
    pub count: u64,
    pub source: TokenSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountStrategy {
    ServerUsage,
    ClientBpe,
    Approximate,
}

pub const DEFAULT_STRATEGIES: [CountStrategy; 3] = [
    CountStrategy::ServerUsage,
    CountStrategy::ClientBpe,
    CountStrategy::Approximate,
];

/// What is available when counting one piece of text.
#[derive(Debug, Clone, Copy, Default)]
pub struct CountContext<'a> {
    pub server_usage: Option<u64>,
    pub merge_table: Option<&'a MergeTable>,
}

/// Uses the first applicable strategy in preference order, falling back to
/// the approximate count when none applies.
pub fn count_tokens(text: &str, strategies: &[CountStrategy], ctx: &CountContext<'_>) -> TokenCountRecord {
    for strategy in strategies {
        match strategy {
            CountStrategy::ServerUsage => {
                if let Some(count) = ctx.server_usage {
                    return TokenCountRecord {
                        count,
                        source: TokenSource::ServerUsage,
                    };
                }
            }
            CountStrategy::ClientBpe => {
                if let Some(table) = ctx.merge_table {
                    return TokenCountRecord {
                        count: bpe_count(text, table),
                        source: TokenSource::ClientBpe,
                    };
                }
            }
            CountStrategy::Approximate => break,
        }
    }
    TokenCountRecord {
        count: approx_token_count(text),
        source: TokenSource::Approximate,
    }
}
