//! Mapping block texts returned by a model back onto document tokens.

use std::collections::BTreeSet;

use crate::model::{normalize_text, Document};

/// Tokens claimed by one response block, plus the response words that
/// matched nothing.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Alignment {
    pub token_ids: BTreeSet<usize>,
    pub unmatched: Vec<String>,
}

/// Normalized word pieces per token; a token holding spaces spans several
/// response words.
fn token_pieces(doc: &Document) -> Vec<Vec<String>> {
    doc.tokens
        .iter()
        .map(|t| normalize_text(&t.text).split(' ').map(str::to_string).collect())
        .collect()
}

fn words(text: &str) -> Vec<String> {
    let n = normalize_text(text);
    if n.is_empty() {
        Vec::new()
    } else {
        n.split(' ').map(str::to_string).collect()
    }
}

/// Aligns longer blocks first, so a short block repeating part of a longer
/// one cannot take its tokens. Each block picks the start token that begins
/// the longest in-order run of its words among unconsumed tokens (earliest
/// on ties), then matches word by word, scanning forward from the last match
/// and wrapping to the start of the document once. Results follow the input
/// order.
pub fn align_blocks(doc: &Document, block_texts: &[String]) -> Vec<Alignment> {
    let pieces = token_pieces(doc);
    let mut used = vec![false; doc.len()];
    let block_words: Vec<Vec<String>> = block_texts.iter().map(|t| words(t)).collect();
    let mut order: Vec<usize> = (0..block_words.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(block_words[i].len()));
    let mut out = vec![Alignment::default(); block_words.len()];
    for i in order {
        out[i] = align_one(&pieces, &mut used, &block_words[i]);
    }
    out
}

fn matches_at(pieces: &[Vec<String>], used: &[bool], t: usize, ws: &[String], w: usize) -> bool {
    !used[t] && ws.len() >= w + pieces[t].len() && ws[w..w + pieces[t].len()] == pieces[t][..]
}

/// Words matched by walking forward from token `t` over unused tokens.
fn run_length(pieces: &[Vec<String>], used: &[bool], t: usize, ws: &[String]) -> usize {
    let (mut w, mut t) = (0, t);
    while t < pieces.len() && w < ws.len() {
        if used[t] {
            t += 1;
            continue;
        }
        if !matches_at(pieces, used, t, ws, w) {
            break;
        }
        w += pieces[t].len();
        t += 1;
    }
    w
}

fn align_one(pieces: &[Vec<String>], used: &mut [bool], ws: &[String]) -> Alignment {
    let mut out = Alignment::default();
    if ws.is_empty() {
        return out;
    }
    let n = pieces.len();
    let mut cursor = (0..n)
        .filter(|&t| matches_at(pieces, used, t, ws, 0))
        .map(|t| (run_length(pieces, used, t, ws), t))
        .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
        .map(|(_, t)| t)
        .unwrap_or(0);
    let mut w = 0;
    while w < ws.len() {
        let hit = (cursor..n).chain(0..cursor).find(|&t| matches_at(pieces, used, t, ws, w));
        match hit {
            Some(t) => {
                used[t] = true;
                out.token_ids.insert(t);
                w += pieces[t].len();
                cursor = t + 1;
                if cursor >= n {
                    cursor = 0;
                }
            }
            None => {
                out.unmatched.push(ws[w].clone());
                w += 1;
            }
        }
    }
    out
}
