//! Deterministic receipts in the shape of the CORD schema, with token-level
//! gold support.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bundled_schema, Corpus, CorpusItem, DatasetName, Split};
use crate::model::{BoundingBox, Document, DocumentValues, FieldValue, LeafValue, Record};

const LINE_HEIGHT: f64 = 0.02;
const LINE_PITCH: f64 = 0.04;
const TOP: f64 = 0.02;
const CHAR_WIDTH: f64 = 0.01;
const WORD_GAP: f64 = 0.005;
const QTY_X: f64 = 0.05;
const NAME_X: f64 = 0.10;
const SUB_X: f64 = 0.14;
const PRICE_RIGHT: f64 = 0.92;
/// Lines that fit on one page at the fixed pitch.
const MAX_LINES: usize = 24;
const FOOTER_LINES: usize = 6;

const DISHES: &[&str] = &[
    "JASMINE MT", "COCONUT JELLY", "NASI GORENG", "MIE AYAM", "ES TEH", "KOPI SUSU", "AYAM BAKAR",
    "SOTO BETAWI", "TAHU ISI", "PISANG GORENG", "BAKSO URAT", "LEMON TEA", "GREEN TEA LATTE",
    "CHOCO MILK", "BEEF BURGER", "FRENCH FRIES", "SATE AYAM", "RAWON", "GADO GADO", "MARTABAK",
    "ICED AMERICANO", "CAPPUCCINO", "ROTI BAKAR", "KWETIAU", "CAP CAY", "NASI UDUK", "PEMPEK",
    "SIOMAY", "BATAGOR", "CROISSANT",
];
const EXTRAS: &[&str] = &[
    "EXTRA CHEESE", "LESS SUGAR", "ADD EGG", "NO ICE", "LARGE", "EXTRA SHOT", "ADD RICE", "PEARL",
    "SPICY", "HOT",
];

/// One printed line item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemSpec {
    /// Printed quantity; `None` leaves the quantity column blank.
    pub qty: Option<u32>,
    /// Number of indented sub-items below the line.
    pub subs: usize,
}

impl ItemSpec {
    pub fn new(qty: Option<u32>, subs: usize) -> Self {
        Self { qty, subs }
    }
}

/// Layout of one receipt; names and prices are drawn from the seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiptSpec {
    pub items: Vec<ItemSpec>,
    /// Print a "TOTAL ITEMS n" line carrying the item count.
    pub count_line: bool,
}

impl ReceiptSpec {
    /// Items counted with their quantity, a blank quantity counting once.
    /// Sub-items are not counted.
    pub fn line_item_count(&self) -> i64 {
        self.items.iter().map(|i| i64::from(i.qty.unwrap_or(1))).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShape {
    pub min_items: usize,
    pub max_items: usize,
    pub max_subs: usize,
    pub sub_prob: f64,
    pub missing_qty_prob: f64,
    pub max_qty: u32,
    pub count_line_prob: f64,
}

impl Default for SyntheticShape {
    fn default() -> Self {
        Self {
            min_items: 1,
            max_items: 5,
            max_subs: 2,
            sub_prob: 0.3,
            missing_qty_prob: 0.25,
            max_qty: 4,
            count_line_prob: 0.5,
        }
    }
}

impl SyntheticShape {
    fn sample(&self, rng: &mut ChaCha8Rng) -> ReceiptSpec {
        let lo = self.min_items.max(1);
        let hi = self.max_items.max(lo);
        let n = rng.random_range(lo..=hi);
        let mut lines_left = MAX_LINES - FOOTER_LINES;
        let mut items = Vec::with_capacity(n);
        for _ in 0..n {
            if lines_left == 0 {
                break;
            }
            lines_left -= 1;
            let qty = if rng.random_bool(self.missing_qty_prob.clamp(0.0, 1.0)) {
                None
            } else {
                Some(rng.random_range(1..=self.max_qty.max(1)))
            };
            let mut subs = 0;
            if self.max_subs > 0 && rng.random_bool(self.sub_prob.clamp(0.0, 1.0)) {
                subs = rng.random_range(1..=self.max_subs).min(lines_left);
            }
            lines_left -= subs;
            items.push(ItemSpec { qty, subs });
        }
        ReceiptSpec {
            items,
            count_line: rng.random_bool(self.count_line_prob.clamp(0.0, 1.0)),
        }
    }
}

fn money(amount: u64) -> String {
    format!("{}.{:03}", amount / 1000, amount % 1000)
}

struct Sheet {
    words: Vec<(String, BoundingBox, u32)>,
    line: usize,
}

impl Sheet {
    fn y(&self) -> (f64, f64) {
        let y0 = TOP + self.line as f64 * LINE_PITCH;
        (y0, y0 + LINE_HEIGHT)
    }

    /// Places the words of `text` left-aligned at `x`; returns their ids.
    fn left(&mut self, text: &str, x: f64) -> Vec<usize> {
        let (y0, y1) = self.y();
        let mut x = x;
        let mut ids = Vec::new();
        for w in text.split_whitespace() {
            let x1 = x + CHAR_WIDTH * w.chars().count() as f64;
            ids.push(self.words.len());
            self.words.push((w.to_string(), BoundingBox { x0: x, y0, x1, y1 }, 0));
            x = x1 + WORD_GAP;
        }
        ids
    }

    /// Places a single word right-aligned at the price column.
    fn right(&mut self, word: &str) -> usize {
        let (y0, y1) = self.y();
        let x0 = PRICE_RIGHT - CHAR_WIDTH * word.chars().count() as f64;
        self.words.push((word.to_string(), BoundingBox { x0, y0, x1: PRICE_RIGHT, y1 }, 0));
        self.words.len() - 1
    }

    /// A "KEY ... amount" line; the value's support covers the key words.
    fn keyed(&mut self, key: &str, amount: &str) -> LeafValue {
        let mut ids = self.left(key, NAME_X);
        ids.push(self.right(amount));
        self.line += 1;
        LeafValue::supported(amount, ids)
    }
}

fn leaf(v: LeafValue) -> FieldValue {
    FieldValue::Leaf(vec![v])
}

/// Renders `spec` as a receipt. The same `(doc_id, spec, seed)` always gives
/// the same item.
pub fn synthetic_receipt(doc_id: &str, spec: &ReceiptSpec, seed: u64) -> CorpusItem {
    assert!(
        spec.items.len() + spec.items.iter().map(|i| i.subs).sum::<usize>() + FOOTER_LINES <= MAX_LINES,
        "receipt does not fit on one page"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names: Vec<&str> = DISHES.to_vec();
    names.shuffle(&mut rng);
    let mut sheet = Sheet { words: Vec::new(), line: 0 };
    let mut menu = Vec::new();
    let mut subtotal = 0u64;

    for (i, item) in spec.items.iter().enumerate() {
        let name = names[i % names.len()];
        let unit = rng.random_range(5..=60u64) * 1000;
        let price = unit * u64::from(item.qty.unwrap_or(1));
        subtotal += price;
        let mut rec = Record::new();
        if let Some(q) = item.qty {
            let ids = sheet.left(&q.to_string(), QTY_X);
            rec.insert("cnt".into(), leaf(LeafValue::supported(q.to_string(), ids)));
        }
        let ids = sheet.left(name, NAME_X);
        rec.insert("nm".into(), leaf(LeafValue::supported(name, ids)));
        let p = money(price);
        let id = sheet.right(&p);
        rec.insert("price".into(), leaf(LeafValue::supported(p, [id])));
        sheet.line += 1;

        let mut extras: Vec<&str> = EXTRAS.to_vec();
        extras.shuffle(&mut rng);
        let mut subs = Vec::new();
        for extra in extras.iter().cycle().take(item.subs) {
            let sp = rng.random_range(0..=5u64) * 1000;
            subtotal += sp;
            let mut s = Record::new();
            let ids = sheet.left(extra, SUB_X);
            s.insert("nm".into(), leaf(LeafValue::supported(*extra, ids)));
            let p = money(sp);
            let id = sheet.right(&p);
            s.insert("price".into(), leaf(LeafValue::supported(p, [id])));
            sheet.line += 1;
            subs.push(s);
        }
        if !subs.is_empty() {
            rec.insert("sub".into(), FieldValue::Group(subs));
        }
        menu.push(rec);
    }

    let tax = subtotal / 10;
    let total = subtotal + tax;
    let cash = total.div_ceil(50_000) * 50_000;
    let mut sub_rec = Record::new();
    sub_rec.insert("subtotal_price".into(), leaf(sheet.keyed("SUB TOTAL", &money(subtotal))));
    sub_rec.insert("tax_price".into(), leaf(sheet.keyed("TAX", &money(tax))));
    let mut total_rec = Record::new();
    total_rec.insert("total_price".into(), leaf(sheet.keyed("TOTAL", &money(total))));
    total_rec.insert("cashprice".into(), leaf(sheet.keyed("CASH", &money(cash))));
    total_rec.insert("changeprice".into(), leaf(sheet.keyed("CHANGE", &money(cash - total))));
    if spec.count_line {
        let n = spec.line_item_count().to_string();
        total_rec.insert("menuqty_cnt".into(), leaf(sheet.keyed("TOTAL ITEMS", &n)));
    }

    let mut fields = Record::new();
    fields.insert("menu".into(), FieldValue::Group(menu));
    fields.insert("subtotal".into(), FieldValue::Group(vec![sub_rec]));
    fields.insert("total".into(), FieldValue::Group(vec![total_rec]));

    let doc = Document::from_words(doc_id, sheet.words, "synthetic").expect("generated words are valid");
    let mut item = CorpusItem::new(doc, DocumentValues::from_record(fields));
    if !spec.count_line {
        item.value_absent.push("line_item_count".into());
    }
    item
}

/// `n` receipts drawn from `shape`; identical for identical arguments.
pub fn generate_synthetic(seed: u64, n: usize, shape: &SyntheticShape) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|i| {
            let spec = shape.sample(&mut rng);
            let doc_seed = rng.random::<u64>();
            synthetic_receipt(&format!("syn-{seed}-{i:04}"), &spec, doc_seed)
        })
        .collect();
    Corpus {
        name: DatasetName::Synthetic,
        split: Split::Test,
        schema: bundled_schema(DatasetName::Synthetic),
        items,
        warnings: Vec::new(),
    }
}

/// Receipts that hide the item count, one shape per hard case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountingPattern {
    /// Some lines print no quantity and count once.
    MissingQuantity,
    /// Lines carry sub-items that must not be counted.
    SubItems,
    /// Several quantities above one that must be added up.
    MultiStep,
}

impl CountingPattern {
    pub const ALL: [CountingPattern; 3] = [Self::MissingQuantity, Self::SubItems, Self::MultiStep];

    pub fn spec(self, rng: &mut ChaCha8Rng) -> ReceiptSpec {
        let items = match self {
            Self::MissingQuantity => {
                let n = rng.random_range(2..=4);
                // At least one blank and one printed quantity.
                (0..n)
                    .map(|i| match i {
                        0 => ItemSpec::new(None, 0),
                        1 => ItemSpec::new(Some(rng.random_range(1..=3)), 0),
                        _ => ItemSpec::new(rng.random_bool(0.5).then(|| rng.random_range(1..=3)), 0),
                    })
                    .collect()
            }
            Self::SubItems => {
                let n = rng.random_range(1..=3);
                (0..n)
                    .map(|i| ItemSpec::new(Some(rng.random_range(1..=2)), if i == 0 { 2 } else { rng.random_range(0..=2) }))
                    .collect()
            }
            Self::MultiStep => {
                let n = rng.random_range(3..=5);
                (0..n).map(|_| ItemSpec::new(Some(rng.random_range(2..=4)), 0)).collect()
            }
        };
        ReceiptSpec { items, count_line: false }
    }
}

/// `n` value-absent receipts cycling through the counting patterns.
pub fn counting_corpus(seed: u64, n: usize) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|i| {
            let spec = CountingPattern::ALL[i % 3].spec(&mut rng);
            let doc_seed = rng.random::<u64>();
            synthetic_receipt(&format!("cnt-{seed}-{i:04}"), &spec, doc_seed)
        })
        .collect();
    Corpus {
        name: DatasetName::Synthetic,
        split: Split::Test,
        schema: bundled_schema(DatasetName::Synthetic),
        items,
        warnings: Vec::new(),
    }
}
