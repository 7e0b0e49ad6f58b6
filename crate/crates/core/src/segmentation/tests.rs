use std::collections::BTreeSet;

use proptest::prelude::*;
use serde_json::json;

use super::*;
use crate::model::{BoundingBox, LeafValue};

pub(crate) fn receipt_schema() -> DocumentSchema {
    DocumentSchema::new(
        "receipt-mini",
        "Receipt line items and totals",
        vec![
            SchemaNode::group(
                "menu",
                true,
                "One purchased line item",
                vec![
                    SchemaNode::leaf("cnt", "Quantity"),
                    SchemaNode::leaf("nm", "Item name"),
                    SchemaNode::leaf("price", "Line price"),
                    SchemaNode::group(
                        "sub",
                        true,
                        "Sub-item of the line item",
                        vec![SchemaNode::leaf("nm", "Sub-item name"), SchemaNode::leaf("price", "Sub-item price")],
                    ),
                ],
            ),
            SchemaNode::group("subtotal", false, "", vec![SchemaNode::leaf("subtotal_price", "Subtotal")]),
            SchemaNode::group("total", false, "", vec![SchemaNode::leaf("total_price", "Grand total")]),
        ],
    )
    .unwrap()
}

type Placed = (&'static str, f64, f64, f64);

/// The running example receipt: one line item with a sub-item, subtotal and
/// total, laid out on four lines.
pub(crate) fn jasmine_receipt() -> (Document, DocumentValues, DocumentSchema) {
    let lines: [&[Placed]; 4] = [
        &[("1", 0.05, 0.07, 0.10), ("JASMINE", 0.10, 0.24, 0.10), ("MT", 0.255, 0.295, 0.10), ("(L)", 0.31, 0.37, 0.10), ("24.000", 0.80, 0.92, 0.10)],
        &[("COCONUT", 0.10, 0.24, 0.14), ("JELLY", 0.255, 0.355, 0.14), ("(", 0.37, 0.39, 0.14), ("L", 0.40, 0.42, 0.14), (")", 0.43, 0.45, 0.14), ("4.000", 0.82, 0.92, 0.14)],
        &[("SUB", 0.10, 0.16, 0.20), ("TOTAL", 0.17, 0.27, 0.20), ("28.000", 0.80, 0.92, 0.20)],
        &[("TOTAL", 0.10, 0.20, 0.24), ("SALE", 0.21, 0.29, 0.24), ("28.000", 0.80, 0.92, 0.24)],
    ];
    let words = lines
        .iter()
        .flat_map(|l| l.iter())
        .map(|&(t, x0, x1, y)| (t.to_string(), BoundingBox::new(x0, y, x1, y + 0.02).unwrap(), 0));
    let doc = Document::from_words("jasmine", words, "synthetic").unwrap();
    let gold = DocumentValues::from_json(&json!({
        "menu": [{
            "cnt": [{"value": "1", "support": [0]}],
            "nm": [{"value": "JASMINE MT (L)", "support": [1, 2, 3]}],
            "price": [{"value": "24.000", "support": [4]}],
            "sub": [{
                "nm": [{"value": "COCONUT JELLY ( L )", "support": [5, 6, 7, 8, 9]}],
                "price": [{"value": "4.000", "support": [10]}]
            }]
        }],
        "subtotal": {"subtotal_price": [{"value": "28.000", "support": [11, 12, 13]}]},
        "total": {"total_price": [{"value": "28.000", "support": [14, 15, 16]}]}
    }))
    .unwrap();
    (doc, gold, receipt_schema())
}

fn block_of(doc: &Document, ids: impl IntoIterator<Item = usize>) -> SemanticBlock {
    SemanticBlock::from_tokens(doc, ids, "")
}

#[test]
fn subtotal_segment_is_a_block() {
    let (doc, gold, schema) = jasmine_receipt();
    let oracle = OracleAnnotator::new(&doc, &gold, &schema);
    let b = block_of(&doc, 11..=13);
    assert_eq!(b.text, "SUB TOTAL 28.000");
    let check = check_block_condition(&b, &doc, &gold, &oracle).unwrap();
    assert!(check.is_block, "{check:?}");
    let alone = oracle.annotate(&b.segment("jasmine"), &b.segment("jasmine")).unwrap();
    assert!(alone.content_eq(&DocumentValues::from_json(&json!({"subtotal": {"subtotal_price": ["28.000"]}})).unwrap()));
}

#[test]
fn sub_item_without_its_line_item_is_not_a_block() {
    let (doc, gold, schema) = jasmine_receipt();
    let oracle = OracleAnnotator::new(&doc, &gold, &schema);
    let b = block_of(&doc, 5..=10);
    assert_eq!(b.text, "COCONUT JELLY ( L ) 4.000");
    let check = check_block_condition(&b, &doc, &gold, &oracle).unwrap();
    assert!(!check.is_block);
    let w = check.witness.unwrap();
    assert_eq!(w.comparison, "v(B,B) vs v(B,D)");
    assert_eq!(w.path, "menu");
    // With its line item the sub-item parses on its own.
    assert!(check_block_condition(&block_of(&doc, 0..=10), &doc, &gold, &oracle).unwrap().is_block);
}

#[test]
fn whole_document_is_a_block() {
    let (doc, gold, schema) = jasmine_receipt();
    let oracle = OracleAnnotator::new(&doc, &gold, &schema);
    let b = block_of(&doc, 0..doc.len());
    assert!(check_block_condition(&b, &doc, &gold, &oracle).unwrap().is_block);
}

#[test]
fn foreign_context_is_rejected() {
    let (doc, gold, schema) = jasmine_receipt();
    let oracle = OracleAnnotator::new(&doc, &gold, &schema);
    let bad = doc.segment([99]);
    let err = oracle.annotate(&doc.segment([0]), &bad).unwrap_err();
    assert!(err.to_string().contains("foreign segment"), "{err}");
}

#[test]
fn oracle_blocks_of_the_running_example() {
    let (doc, gold, schema) = jasmine_receipt();
    let set = oracle_blocks_from_labels(&doc, &gold, &schema).unwrap();
    let texts: Vec<&str> = set.blocks.iter().map(|b| b.text.as_str()).collect();
    assert_eq!(
        texts,
        ["1 JASMINE MT (L) 24.000 COCONUT JELLY ( L ) 4.000", "SUB TOTAL 28.000", "TOTAL SALE 28.000"]
    );
    let ids: Vec<&str> = set.blocks.iter().map(|b| b.block_id.as_str()).collect();
    assert_eq!(ids, ["block_1", "block_2", "block_3"]);
    assert!(set.blocks[1].partial_values.as_ref().unwrap().content_eq(
        &DocumentValues::from_json(&json!({"subtotal": {"subtotal_price": ["28.000"]}})).unwrap()
    ));
    set.check_partition(&doc, true).unwrap();
}

#[test]
fn empty_gold_yields_a_single_others_block() {
    let (doc, _, schema) = jasmine_receipt();
    let set = oracle_blocks_from_labels(&doc, &DocumentValues::new(), &schema).unwrap();
    assert_eq!(set.len(), 1);
    assert!(set.blocks[0].others);
    assert_eq!(set.blocks[0].token_ids.len(), doc.len());
}

#[test]
fn oracle_blocks_need_token_support() {
    let (doc, _, schema) = jasmine_receipt();
    let gold = DocumentValues::from_json(&json!({"total": {"total_price": ["28.000"]}})).unwrap();
    let err = oracle_blocks_from_labels(&doc, &gold, &schema).unwrap_err();
    assert!(err.to_string().starts_with("unsupported gold"), "{err}");
}

#[test]
fn two_items_subtotal_and_total_give_four_blocks_plus_others() {
    let words = ["STORE", "A", "1.0", "B", "2.0", "SUB", "3.0", "TOTAL", "3.0", "THANKS"];
    let b = BoundingBox::new(0.0, 0.0, 0.1, 0.1).unwrap();
    let doc = Document::from_words("d", words.iter().map(|w| (w.to_string(), b, 0)), "synthetic").unwrap();
    let gold = DocumentValues::from_json(&json!({
        "menu": [
            {"nm": [{"value": "A", "support": [1]}], "price": [{"value": "1.0", "support": [2]}]},
            {"nm": [{"value": "B", "support": [3]}], "price": [{"value": "2.0", "support": [4]}]}
        ],
        "subtotal": {"subtotal_price": [{"value": "3.0", "support": [5, 6]}]},
        "total": {"total_price": [{"value": "3.0", "support": [7, 8]}]}
    }))
    .unwrap();
    let set = oracle_blocks_from_labels(&doc, &gold, &receipt_schema()).unwrap();
    let entity_blocks: Vec<&SemanticBlock> = set.blocks.iter().filter(|b| !b.others).collect();
    let others: Vec<&SemanticBlock> = set.blocks.iter().filter(|b| b.others).collect();
    assert_eq!(entity_blocks.len(), 4);
    assert_eq!(others.len(), 1);
    assert_eq!(others[0].text, "STORE THANKS");
    set.check_partition(&doc, true).unwrap();
}

#[test]
fn others_blocks_are_split_by_page() {
    let b = BoundingBox::new(0.0, 0.0, 0.1, 0.1).unwrap();
    let words = vec![("a".to_string(), b, 0), ("b".to_string(), b, 1), ("c".to_string(), b, 0)];
    let doc = Document::from_words("d", words, "synthetic").unwrap();
    let set = oracle_blocks_from_labels(&doc, &DocumentValues::new(), &receipt_schema()).unwrap();
    let texts: Vec<&str> = set.blocks.iter().map(|b| b.text.as_str()).collect();
    assert_eq!(texts, ["a c", "b"]);
}

fn atoms_of(doc: &Document, groups: &[&[usize]]) -> Vec<SemanticAtom> {
    groups
        .iter()
        .enumerate()
        .map(|(i, g)| SemanticAtom {
            atom_id: i,
            token_ids: g.to_vec(),
            bbox: doc.tokens[g[0]].bbox,
        })
        .collect()
}

fn link(a: usize, b: usize) -> Linkage {
    Linkage {
        from_atom: a,
        to_atom: b,
        kind: LinkKind::AttributeValue,
    }
}

#[test]
fn linked_atoms_form_one_block() {
    let (doc, _, _) = jasmine_receipt();
    let atoms = atoms_of(&doc, &[&[11, 12], &[13]]);
    let set = assemble_blocks(&doc, &atoms, &[link(0, 1)]).unwrap();
    assert_eq!(set.len(), 1);
    assert_eq!(set.blocks[0].text, "SUB TOTAL 28.000");
    assert_eq!(set.blocks[0].atom_ids, [0, 1]);

    let set = assemble_blocks(&doc, &atoms, &[]).unwrap();
    assert_eq!(set.len(), 2);
}

#[test]
fn dangling_and_self_links_are_errors() {
    let (doc, _, _) = jasmine_receipt();
    let atoms = atoms_of(&doc, &[&[0], &[1]]);
    assert!(matches!(
        assemble_blocks(&doc, &atoms, &[link(0, 7)]),
        Err(SegmentationError::DanglingLinkage { from: 0, to: 7 })
    ));
    assert!(matches!(assemble_blocks(&doc, &atoms, &[link(1, 1)]), Err(SegmentationError::SelfLinkage(1))));
}

/// Components by transitive closure of the adjacency matrix.
fn closure_components(n: usize, edges: &[(usize, usize)]) -> BTreeSet<BTreeSet<usize>> {
    let mut reach = vec![vec![false; n]; n];
    for (i, row) in reach.iter_mut().enumerate() {
        row[i] = true;
    }
    for &(a, b) in edges {
        reach[a][b] = true;
        reach[b][a] = true;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    (0..n).map(|i| (0..n).filter(|&j| reach[i][j]).collect()).collect()
}

fn atom_partition(set: &BlockSet) -> BTreeSet<BTreeSet<usize>> {
    set.blocks.iter().map(|b| b.atom_ids.iter().copied().collect()).collect()
}

#[test]
fn assembly_matches_closure_on_all_three_node_graphs() {
    let (doc, _, _) = jasmine_receipt();
    let atoms = atoms_of(&doc, &[&[0], &[1], &[2]]);
    let pairs = [(0, 1), (1, 2), (0, 2)];
    for mask in 0..8u32 {
        let edges: Vec<(usize, usize)> = pairs.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, p)| *p).collect();
        let links: Vec<Linkage> = edges.iter().map(|&(a, b)| link(a, b)).collect();
        let set = assemble_blocks(&doc, &atoms, &links).unwrap();
        assert_eq!(atom_partition(&set), closure_components(3, &edges), "mask {mask:03b}");
    }
    let chain = assemble_blocks(&doc, &atoms, &[link(0, 1), link(1, 2)]).unwrap();
    assert_eq!(chain.blocks[0].text, "1 JASMINE MT");
}

fn spread_doc(n: usize) -> Document {
    let words = (0..n).map(|i| {
        let y = 0.02 + 0.9 * i as f64 / n.max(1) as f64;
        (format!("w{i}"), BoundingBox::new(0.1, y, 0.2, y + 0.005).unwrap(), 0)
    });
    Document::from_words("p", words, "synthetic").unwrap()
}

/// Random gold over a synthetic token stream: line items (name tokens, a
/// price, optional sub-items), optional subtotal and total with key words,
/// and filler tokens in between.
#[derive(Debug, Clone)]
struct GoldShape {
    items: Vec<(usize, usize)>,
    subtotal: bool,
    total: bool,
    filler: Vec<usize>,
}

fn gold_shape() -> impl Strategy<Value = GoldShape> {
    (
        prop::collection::vec((1usize..4, 0usize..3), 1..5),
        any::<bool>(),
        any::<bool>(),
        prop::collection::vec(0usize..3, 8),
    )
        .prop_map(|(items, subtotal, total, filler)| GoldShape {
            items,
            subtotal,
            total,
            filler,
        })
}

fn build_from_shape(shape: &GoldShape) -> (Document, DocumentValues) {
    let mut next = 0usize;
    let mut take = |k: usize| -> Vec<usize> {
        let ids = (next..next + k).collect();
        next += k;
        ids
    };
    let mut fill = shape.filler.iter().cycle();
    let mut menu = Vec::new();
    for (i, &(name_len, subs)) in shape.items.iter().enumerate() {
        take(*fill.next().unwrap());
        let nm = take(name_len);
        let price = take(1);
        let mut rec = Record::new();
        rec.insert("nm".into(), FieldValue::Leaf(vec![LeafValue::supported(format!("item{i}"), nm)]));
        rec.insert("price".into(), FieldValue::Leaf(vec![LeafValue::supported(format!("{i}.00"), price)]));
        let sub: Vec<Record> = (0..subs)
            .map(|s| {
                let mut r = Record::new();
                r.insert("nm".into(), FieldValue::Leaf(vec![LeafValue::supported(format!("sub{i}.{s}"), take(1))]));
                r
            })
            .collect();
        if !sub.is_empty() {
            rec.insert("sub".into(), FieldValue::Group(sub));
        }
        menu.push(rec);
    }
    let mut fields = Record::new();
    fields.insert("menu".into(), FieldValue::Group(menu));
    for (on, group, leaf) in [(shape.subtotal, "subtotal", "subtotal_price"), (shape.total, "total", "total_price")] {
        if on {
            take(*fill.next().unwrap());
            let mut r = Record::new();
            r.insert(leaf.into(), FieldValue::Leaf(vec![LeafValue::supported("9.00", take(2))]));
            fields.insert(group.into(), FieldValue::Group(vec![r]));
        }
    }
    take(*fill.next().unwrap());
    (spread_doc(next), DocumentValues::from_record(fields))
}

proptest! {
    #[test]
    fn oracle_blocks_partition_and_satisfy_the_block_condition(shape in gold_shape()) {
        let (doc, gold) = build_from_shape(&shape);
        let schema = receipt_schema();
        let oracle = OracleAnnotator::new(&doc, &gold, &schema);
        let set = oracle_blocks_from_labels(&doc, &gold, &schema).unwrap();
        set.check_partition(&doc, true).unwrap();
        for b in &set.blocks {
            let check = check_block_condition(b, &doc, &gold, &oracle).unwrap();
            prop_assert!(check.is_block, "{} {:?}", b.text, check.witness);
        }
        let expected = shape.items.len() + shape.subtotal as usize + shape.total as usize;
        prop_assert_eq!(set.blocks.iter().filter(|b| !b.others).count(), expected);
    }

    #[test]
    fn cutting_a_line_item_breaks_the_block_condition(shape in gold_shape()) {
        let (doc, gold) = build_from_shape(&shape);
        let schema = receipt_schema();
        let oracle = OracleAnnotator::new(&doc, &gold, &schema);
        let set = oracle_blocks_from_labels(&doc, &gold, &schema).unwrap();
        let first_item = &set.blocks.iter().find(|b| !b.others).unwrap().token_ids;
        let mut merged: BTreeSet<usize> = first_item[1..].iter().copied().collect();
        if let Some(other) = set.blocks.iter().filter(|b| !b.others).nth(1) {
            merged.extend(other.token_ids.iter().copied());
        }
        let b = SemanticBlock::from_tokens(&doc, merged, "");
        prop_assert!(!check_block_condition(&b, &doc, &gold, &oracle).unwrap().is_block);
    }

    #[test]
    fn assembly_is_a_partition_and_order_invariant(
        n in 1usize..9,
        raw_links in prop::collection::vec((0usize..9, 0usize..9), 0..12),
        seed in any::<u64>(),
    ) {
        let doc = spread_doc(n);
        let atoms: Vec<SemanticAtom> = (0..n)
            .map(|i| SemanticAtom { atom_id: i, token_ids: vec![i], bbox: doc.tokens[i].bbox })
            .collect();
        let links: Vec<Linkage> = raw_links
            .into_iter()
            .filter(|&(a, b)| a < n && b < n && a != b)
            .map(|(a, b)| link(a, b))
            .collect();
        let set = assemble_blocks(&doc, &atoms, &links).unwrap();
        set.check_partition(&doc, true).unwrap();
        let edges: Vec<(usize, usize)> = links.iter().map(|l| (l.from_atom, l.to_atom)).collect();
        prop_assert_eq!(atom_partition(&set), closure_components(n, &edges));

        use rand::{seq::SliceRandom, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (mut atoms2, mut links2) = (atoms.clone(), links.clone());
        atoms2.shuffle(&mut rng);
        links2.shuffle(&mut rng);
        let again = assemble_blocks(&doc, &atoms2, &links2).unwrap();
        prop_assert_eq!(again, set);
    }

    #[test]
    fn atoms_partition_tokens_and_cannot_be_split(
        boxes in prop::collection::vec((0.0f64..0.9, 0.0f64..0.9, 0.01f64..0.1, 0.01f64..0.03, 1usize..6), 0..14),
        split_seed in any::<u64>(),
    ) {
        let words = boxes.iter().map(|&(x, y, w, h, len)| {
            ("x".repeat(len), BoundingBox::new(x, y, x + w, y + h).unwrap(), 0)
        });
        let doc = Document::from_words("g", words, "synthetic").unwrap();
        let params = GeometryParams::default();
        let atoms = group_atoms(&doc, params);
        let mut seen = BTreeSet::new();
        for a in &atoms {
            for &t in &a.token_ids {
                prop_assert!(seen.insert(t));
            }
        }
        prop_assert_eq!(seen.len(), doc.len());
        let layout = Layout::analyze(&doc, params);
        for a in atoms.iter().filter(|a| a.token_ids.len() > 1) {
            // Every bipartition of a multi-token atom has a chained pair across it.
            let k = a.token_ids.len();
            let mask = (split_seed as usize % ((1 << k) - 2)) + 1;
            let (left, right): (Vec<_>, Vec<_>) = a.token_ids.iter().enumerate().partition(|(i, _)| mask >> i & 1 == 1);
            let crosses = left.iter().any(|(_, &i)| right.iter().any(|(_, &j)| layout.chainable(i, j)));
            prop_assert!(crosses);
        }
    }
}
