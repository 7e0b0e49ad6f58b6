//! Grouping of OCR tokens into semantic atoms by proximity and alignment.

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::model::{BoundingBox, Document};

/// Thresholds of the token chaining predicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryParams {
    /// Max horizontal gap, in median character widths of the line.
    pub horizontal_gap_factor: f64,
    /// Min vertical overlap (fraction of the shorter box) for same-line tokens.
    pub min_vertical_overlap: f64,
    /// Max vertical gap, in median line heights of the page.
    pub vertical_gap_factor: f64,
    /// Min horizontal overlap (fraction of the narrower box) for stacked tokens.
    pub min_horizontal_overlap: f64,
}

impl Default for GeometryParams {
    fn default() -> Self {
        Self {
            horizontal_gap_factor: 1.0,
            min_vertical_overlap: 0.5,
            vertical_gap_factor: 0.6,
            min_horizontal_overlap: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticAtom {
    pub atom_id: usize,
    /// Member tokens in reading order.
    pub token_ids: Vec<usize>,
    pub bbox: BoundingBox,
}

fn overlap_ratio(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    let overlap = (a1.min(b1) - a0.max(b0)).max(0.0);
    let shorter = (a1 - a0).min(b1 - b0);
    if shorter <= 0.0 {
        // Degenerate boxes overlap fully when they touch.
        if overlap > 0.0 || (a0 <= b1 && b0 <= a1) {
            1.0
        } else {
            0.0
        }
    } else {
        overlap / shorter
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Per-document layout statistics backing the chaining predicate.
#[derive(Debug, Clone)]
pub struct Layout<'a> {
    doc: &'a Document,
    params: GeometryParams,
    /// Line index of each token.
    line_of: Vec<usize>,
    line_char_width: Vec<f64>,
    /// Median token height per page, indexed by token.
    page_line_height: Vec<f64>,
}

impl<'a> Layout<'a> {
    pub fn analyze(doc: &'a Document, params: GeometryParams) -> Self {
        let n = doc.tokens.len();
        let mut lines = UnionFind::<usize>::new(n);
        for i in 0..n {
            for j in i + 1..n {
                if Self::same_line(doc, &params, i, j) {
                    lines.union(i, j);
                }
            }
        }
        let labels = lines.into_labeling();
        let mut line_index = std::collections::BTreeMap::new();
        let line_of: Vec<usize> = labels
            .iter()
            .map(|l| {
                let next = line_index.len();
                *line_index.entry(*l).or_insert(next)
            })
            .collect();
        let mut widths = vec![Vec::new(); line_index.len()];
        for (t, &line) in doc.tokens.iter().zip(&line_of) {
            let chars = t.text.chars().count().max(1) as f64;
            widths[line].push(t.bbox.width() / chars);
        }
        let line_char_width = widths.into_iter().map(median).collect();

        let mut heights: std::collections::BTreeMap<u32, Vec<f64>> = Default::default();
        for t in &doc.tokens {
            heights.entry(t.page_index).or_default().push(t.bbox.height());
        }
        let page_median: std::collections::BTreeMap<u32, f64> =
            heights.into_iter().map(|(p, h)| (p, median(h))).collect();
        let page_line_height = doc.tokens.iter().map(|t| page_median[&t.page_index]).collect();

        Self {
            doc,
            params,
            line_of,
            line_char_width,
            page_line_height,
        }
    }

    fn same_line(doc: &Document, params: &GeometryParams, i: usize, j: usize) -> bool {
        let (a, b) = (&doc.tokens[i], &doc.tokens[j]);
        a.page_index == b.page_index
            && overlap_ratio(a.bbox.y0, a.bbox.y1, b.bbox.y0, b.bbox.y1) >= params.min_vertical_overlap
    }

    /// Whether tokens `i` and `j` may share an atom: horizontally adjacent on
    /// one line, or vertically stacked with aligned columns.
    pub fn chainable(&self, i: usize, j: usize) -> bool {
        let (a, b) = (&self.doc.tokens[i], &self.doc.tokens[j]);
        if a.page_index != b.page_index {
            return false;
        }
        let p = &self.params;
        if Self::same_line(self.doc, p, i, j) {
            let gap = (a.bbox.x0.max(b.bbox.x0) - a.bbox.x1.min(b.bbox.x1)).max(0.0);
            let limit = p.horizontal_gap_factor * self.line_char_width[self.line_of[i]];
            if gap <= limit {
                return true;
            }
        }
        if overlap_ratio(a.bbox.x0, a.bbox.x1, b.bbox.x0, b.bbox.x1) >= p.min_horizontal_overlap {
            let gap = (a.bbox.y0.max(b.bbox.y0) - a.bbox.y1.min(b.bbox.y1)).max(0.0);
            return gap <= p.vertical_gap_factor * self.page_line_height[i];
        }
        false
    }
}

/// Partitions the document's tokens into atoms: the connected components of
/// the chaining predicate. Atoms are numbered by their first token.
pub fn group_atoms(doc: &Document, params: GeometryParams) -> Vec<SemanticAtom> {
    let n = doc.tokens.len();
    if n == 0 {
        return Vec::new();
    }
    let layout = Layout::analyze(doc, params);
    let mut uf = UnionFind::<usize>::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if layout.chainable(i, j) {
                uf.union(i, j);
            }
        }
    }
    let labels = uf.into_labeling();
    let mut by_root: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (t, root) in labels.iter().enumerate() {
        by_root.entry(*root).or_default().push(t);
    }
    let mut groups: Vec<Vec<usize>> = by_root.into_values().collect();
    groups.sort_by_key(|g| g[0]);
    groups
        .into_iter()
        .enumerate()
        .map(|(atom_id, token_ids)| {
            let bbox = token_ids
                .iter()
                .map(|&t| doc.tokens[t].bbox)
                .reduce(|a, b| a.union(&b))
                .expect("non-empty group");
            SemanticAtom {
                atom_id,
                token_ids,
                bbox,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BoundingBox;

    fn word(text: &str, x0: f64, y0: f64, x1: f64, y1: f64) -> (String, BoundingBox, u32) {
        (text.to_string(), BoundingBox::new(x0, y0, x1, y1).unwrap(), 0)
    }

    fn texts(doc: &Document, atoms: &[SemanticAtom]) -> Vec<String> {
        atoms.iter().map(|a| doc.text_of(a.token_ids.iter().copied())).collect()
    }

    #[test]
    fn adjacent_words_on_a_line_form_one_atom() {
        // char width 0.01; gap between TOTAL and ITEMS is 0.005
        let doc = Document::from_words(
            "d",
            vec![word("TOTAL", 0.10, 0.50, 0.15, 0.52), word("ITEMS", 0.155, 0.50, 0.205, 0.52)],
            "synthetic",
        )
        .unwrap();
        assert_eq!(texts(&doc, &group_atoms(&doc, GeometryParams::default())), ["TOTAL ITEMS"]);
    }

    #[test]
    fn distant_value_on_the_same_line_is_a_separate_atom() {
        let doc = Document::from_words(
            "d",
            vec![
                word("TOTAL", 0.10, 0.50, 0.15, 0.52),
                word("ITEMS", 0.155, 0.50, 0.205, 0.52),
                word("1", 0.80, 0.50, 0.81, 0.52),
            ],
            "synthetic",
        )
        .unwrap();
        let atoms = group_atoms(&doc, GeometryParams::default());
        assert_eq!(texts(&doc, &atoms), ["TOTAL ITEMS", "1"]);
        assert_eq!(atoms[1].atom_id, 1);
    }

    #[test]
    fn stacked_aligned_words_chain_vertically() {
        let doc = Document::from_words(
            "d",
            vec![
                word("JALAN", 0.10, 0.10, 0.20, 0.12),
                word("MERDEKA", 0.10, 0.125, 0.24, 0.145),
                word("FAR", 0.10, 0.30, 0.16, 0.32),
            ],
            "synthetic",
        )
        .unwrap();
        assert_eq!(texts(&doc, &group_atoms(&doc, GeometryParams::default())), ["JALAN MERDEKA", "FAR"]);
    }

    #[test]
    fn empty_document_has_no_atoms() {
        let doc = Document::new("d", vec![], "synthetic").unwrap();
        assert!(group_atoms(&doc, GeometryParams::default()).is_empty());
    }

    #[test]
    fn atom_box_is_the_union_of_member_boxes() {
        let doc = Document::from_words(
            "d",
            vec![word("A", 0.10, 0.50, 0.12, 0.52), word("B", 0.125, 0.49, 0.145, 0.515)],
            "synthetic",
        )
        .unwrap();
        let atoms = group_atoms(&doc, GeometryParams::default());
        assert_eq!(atoms.len(), 1);
        assert_eq!(atoms[0].bbox, BoundingBox { x0: 0.10, y0: 0.49, x1: 0.145, y1: 0.52 });
    }
}
