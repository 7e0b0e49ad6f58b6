use std::sync::Arc;

use serde_json::json;

use super::*;
use crate::corpus::{generate_synthetic, synthetic_receipt, CorpusItem, ItemSpec, ReceiptSpec, SyntheticShape};
use crate::gateway::{Backend, CachingBackend, CompletionResponse, FixtureStore, ReplayBackend};
use crate::model::BoundingBox;
use crate::segmentation::oracle_blocks_from_labels;
use crate::segmentation::tests::jasmine_receipt;

/// Answers through a closure over the request.
struct FnBackend<F>(F);

impl<F> Backend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<String, GatewayError> + Send + Sync,
{
    fn id(&self) -> &str {
        "fn"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        (self.0)(request).map(|text| CompletionResponse {
            text,
            backend_id: "fn".into(),
            latency_ms: 0,
            token_usage: None,
            attempts: 1,
        })
    }
}

fn fn_gateway<F>(f: F) -> Gateway
where
    F: Fn(&CompletionRequest) -> Result<String, GatewayError> + Send + Sync + 'static,
{
    Gateway::unlimited(Arc::new(FnBackend(f)))
}

fn jasmine_setup() -> (CorpusItem, DocumentSchema, ExamplePools) {
    let (doc, gold, schema) = jasmine_receipt();
    let item = CorpusItem::new(doc, gold);
    let pools = build_example_pool(std::slice::from_ref(&item), &schema, None, PoolMode::Oracle).unwrap();
    (item, schema, pools)
}

fn gold_gateway(schema: &DocumentSchema, items: &[CorpusItem]) -> Gateway {
    Gateway::unlimited(Arc::new(GoldBackend::new(schema.clone(), items)))
}

#[test]
fn blocks_are_read_in_numeric_order() {
    let v = json!({"block_10": {"reason": "c", "text": "z"}, "block_2": {"reason": "b", "text": ["x", "y"]}, "extra": {"text": "w"}, "block_1": "bad"});
    let blocks = object_blocks(&v);
    let texts: Vec<&str> = blocks.iter().map(|b| b.text.as_str()).collect();
    assert_eq!(texts, ["x y", "z", "w"]);
    assert!(object_blocks(&json!([1])).is_empty());
}

#[test]
fn gold_answers_reproduce_the_labels() {
    let (item, schema, pools) = jasmine_setup();
    let gw = gold_gateway(&schema, std::slice::from_ref(&item));
    let config = RunConfig::new(schema.clone(), FixtureMode::Oracle);
    let r = extract(&item.doc, &pools, &gw, &config);
    assert!(r.values.content_eq(&item.gold), "{}", r.values);
    assert!(r.flags.is_empty(), "{:?}", r.flags);
    assert_eq!(r.stages_succeeded(), 3);
    let texts: Vec<&str> = r.blocks.blocks.iter().map(|b| b.text.as_str()).collect();
    assert_eq!(texts, ["1 JASMINE MT (L) 24.000 COCONUT JELLY ( L ) 4.000", "SUB TOTAL 28.000", "TOTAL SALE 28.000"]);
    assert_eq!(r.parses.len(), r.blocks.len());
    let sub = r.parses.iter().find(|p| p.block_id == "block_2").unwrap();
    assert!(sub.values.content_eq(&DocumentValues::from_json(&json!({"subtotal": {"subtotal_price": ["28.000"]}})).unwrap()));
    assert!(r.combiner_reason.is_some());
}

#[test]
fn uncovered_tokens_are_swept_into_others() {
    let (item, schema, pools) = jasmine_setup();
    let gw = fn_gateway(|req| match req.tag.stage.as_str() {
        "block_creator" => Ok(json!({
            "block_1": {"reason": "item", "text": "1 JASMINE MT (L) 24.000 COCONUT JELLY ( L ) 4.000"},
            "block_2": {"reason": "subtotal", "text": "SUB TOTAL 28.000"}
        })
        .to_string()),
        _ => Ok("{}".into()),
    });
    let config = RunConfig::new(schema, FixtureMode::Live);
    let (blocks, trace) = create_blocks(&item.doc, &pools, &gw, &config);
    assert!(trace.ok);
    blocks.check_partition(&item.doc, true).unwrap();
    let last = blocks.blocks.last().unwrap();
    assert!(last.others);
    assert_eq!(last.text, "TOTAL SALE 28.000");
    let (parse, exchanges) = parse_block("jasmine", last, &pools, &gw, &config);
    assert!(parse.ok && parse.values.is_empty() && exchanges.is_empty());
}

#[test]
fn empty_document_has_no_blocks() {
    let (_, schema, pools) = jasmine_setup();
    let doc = Document::new("empty", Vec::new(), "synthetic").unwrap();
    let gw = fn_gateway(|_| panic!("no request expected"));
    let config = RunConfig::new(schema, FixtureMode::Live);
    let r = extract(&doc, &pools, &gw, &config);
    assert!(r.blocks.is_empty() && r.values.is_empty());
    assert_eq!(r.stages_succeeded(), 3);
}

#[test]
fn unusable_creator_answer_falls_back_to_atoms() {
    let (item, schema, pools) = jasmine_setup();
    let gw = fn_gateway(|_| Ok("I cannot help with that.".into()));
    let config = RunConfig::new(schema, FixtureMode::Live);
    let (blocks, trace) = create_blocks(&item.doc, &pools, &gw, &config);
    assert!(!trace.ok);
    // First answer and reprompt.
    assert_eq!(trace.exchanges.len(), 2);
    blocks.check_partition(&item.doc, true).unwrap();
    assert!(blocks.blocks.iter().all(|b| b.atom_ids.len() == 1));
    assert!(blocks.blocks.iter().any(|b| b.text == "SUB TOTAL"));
}

#[test]
fn parse_drops_paths_outside_the_schema() {
    let (item, schema, pools) = jasmine_setup();
    let gw = fn_gateway(|_| Ok("```json\n{\"subtotal\": {\"subtotal_price\": \"28.000\", \"cashier\": \"AMY\"}, \"store\": \"X\"}\n```".into()));
    let config = RunConfig::new(schema, FixtureMode::Live);
    let block = SemanticBlock::from_tokens(&item.doc, 11..=13, "subtotal line");
    let (parse, _) = parse_block("jasmine", &block, &pools, &gw, &config);
    assert!(parse.ok);
    assert_eq!(parse.notes.len(), 2, "{:?}", parse.notes);
    assert!(parse.values.content_eq(&DocumentValues::from_json(&json!({"subtotal": {"subtotal_price": ["28.000"]}})).unwrap()));

    let bad = fn_gateway(|_| Ok("no dictionary here".into()));
    let (parse, _) = parse_block("jasmine", &block, &pools, &bad, &RunConfig::new(receipt(), FixtureMode::Live));
    assert!(!parse.ok && parse.values.is_empty());
    assert!(parse.notes[0].starts_with("parse failure"));
}

fn receipt() -> DocumentSchema {
    jasmine_receipt().2
}

#[test]
fn missing_combiner_answer_merges_parses() {
    let (item, schema, pools) = jasmine_setup();
    let gold = GoldBackend::new(schema.clone(), std::slice::from_ref(&item));
    let gw = fn_gateway(move |req| {
        if req.tag.stage == "block_combiner" {
            Err(GatewayError::FixtureMissing(req.fixture_key.to_string()))
        } else {
            gold.complete(req).map(|r| r.text)
        }
    });
    let config = RunConfig::new(schema.clone(), FixtureMode::Live);
    let r = extract(&item.doc, &pools, &gw, &config);
    assert_eq!(r.flags, ["deterministic combine"]);
    let parts: Vec<DocumentValues> = r.parses.iter().map(|p| p.values.clone()).collect();
    assert_eq!(r.values, merge_values(&parts, &schema).values);
    assert!(r.values.content_eq(&item.gold));
    assert_eq!(r.stages_succeeded(), 2);
}

#[test]
fn single_block_skips_the_combiner() {
    let (_, schema, pools) = jasmine_setup();
    let doc = Document::from_words("one", [("SUB".to_string(), BoundingBox::new(0.1, 0.1, 0.2, 0.12).unwrap(), 0), ("28.000".to_string(), BoundingBox::new(0.8, 0.1, 0.9, 0.12).unwrap(), 0)], "t").unwrap();
    let gw = fn_gateway(|req| match req.tag.stage.as_str() {
        "block_creator" => Ok(r#"{"block_1": {"reason": "r", "text": "SUB 28.000"}}"#.into()),
        "block_parser" => Ok(r#"{"subtotal": {"subtotal_price": ["28.000"]}}"#.into()),
        _ => panic!("combiner must not be asked"),
    });
    let r = extract(&doc, &pools, &gw, &RunConfig::new(schema, FixtureMode::Live));
    assert_eq!(r.values, r.parses[0].values);
    assert!(!r.values.is_empty());
}

#[test]
fn replay_without_fixtures_yields_empty_values() {
    let (item, schema, pools) = jasmine_setup();
    let gw = Gateway::unlimited(Arc::new(ReplayBackend::new(Arc::new(FixtureStore::in_memory()))));
    let r = extract(&item.doc, &pools, &gw, &RunConfig::new(schema, FixtureMode::Replay));
    assert!(r.values.is_empty());
    assert_eq!(r.stages_succeeded(), 0);
    assert!(r.flags.contains(&"fallback".to_string()));
    let creator = r.trace("block_creator").unwrap();
    assert!(creator.exchanges[0].error.as_deref().unwrap().starts_with("fixture missing"));
}

#[test]
fn combiner_disabled_is_merge_of_parses() {
    let corpus = generate_synthetic(5, 6, &SyntheticShape::default());
    let pools = build_example_pool(&corpus.items, &corpus.schema, None, PoolMode::Oracle).unwrap();
    let gw = gold_gateway(&corpus.schema, &corpus.items);
    let mut config = RunConfig::new(corpus.schema.clone(), FixtureMode::Oracle);
    config.combiner_enabled = false;
    for item in &corpus.items {
        let r = extract(&item.doc, &pools, &gw, &config);
        let parts: Vec<DocumentValues> = r.parses.iter().map(|p| p.values.clone()).collect();
        assert_eq!(r.values, merge_values(&parts, &corpus.schema).values);
        assert!(r.combiner_reason.is_none());
    }
}

#[test]
fn labeling_a_two_item_receipt_gives_four_examples() {
    let spec = ReceiptSpec {
        items: vec![ItemSpec::new(Some(1), 0), ItemSpec::new(Some(2), 0)],
        count_line: false,
    };
    let item = synthetic_receipt("two", &spec, 4);
    let schema = crate::corpus::bundled_schema(crate::corpus::DatasetName::Synthetic);
    let store = Arc::new(FixtureStore::in_memory());
    let record = Gateway::unlimited(Arc::new(CachingBackend::new(
        Arc::new(GoldBackend::new(schema.clone(), std::slice::from_ref(&item))),
        store.clone(),
    )));
    let fresh = label_train_document(&item.doc, &item.gold, &schema, &record).unwrap();
    let replay = Gateway::unlimited(Arc::new(ReplayBackend::new(store)));
    let examples = label_train_document(&item.doc, &item.gold, &schema, &replay).unwrap();
    assert_eq!(examples, fresh);
    assert_eq!(examples.len(), 4);
    assert!(examples.iter().all(|e| e.flags.is_empty()), "{examples:?}");
    assert_eq!(examples.iter().filter(|e| e.partial_values.fields.contains_key("menu")).count(), 2);
}

#[test]
fn labeling_flags_wrong_blocks_without_dropping_them() {
    let (item, schema, _) = jasmine_setup();
    let gw = fn_gateway(|_| {
        Ok(json!({
            "block_1": {"reason": "r", "text": "1 JASMINE MT (L) 24.000", "parsed": {"menu": [{"nm": ["JASMINE MT (L)"]}]}},
            "block_2": {"reason": "r", "text": "COCONUT JELLY ( L ) 4.000 SUB TOTAL 28.000 TOTAL SALE 28.000", "parsed": {}}
        })
        .to_string())
    });
    let examples = label_train_document(&item.doc, &item.gold, &schema, &gw).unwrap();
    assert_eq!(examples.len(), 2);
    assert!(examples[0].flags.iter().any(|f| f.contains("differ")));
    assert!(examples[1].flags.iter().any(|f| f == "not a semantic block"));
}

#[test]
fn empty_gold_labels_to_blank_examples() {
    let (doc, _, schema) = jasmine_receipt();
    let item = CorpusItem::new(doc, DocumentValues::new());
    let gw = gold_gateway(&schema, std::slice::from_ref(&item));
    let examples = label_train_document(&item.doc, &item.gold, &schema, &gw).unwrap();
    assert_eq!(examples.len(), 1);
    assert!(examples[0].partial_values.is_empty());
}

#[test]
fn oracle_pool_has_one_entry_per_gold_block() {
    let corpus = generate_synthetic(7, 10, &SyntheticShape::default());
    let pools = build_example_pool(&corpus.items, &corpus.schema, None, PoolMode::Oracle).unwrap();
    let expected: usize = corpus
        .items
        .iter()
        .map(|i| oracle_blocks_from_labels(&i.doc, &i.gold, &corpus.schema).unwrap().len())
        .sum();
    assert_eq!(pools.block_index.len(), expected);
    assert_eq!(pools.doc_index.len(), 10);
    let back = ExamplePools::from_json_str(&pools.to_json_string()).unwrap();
    assert_eq!(back, pools);
}

#[test]
fn pool_of_failed_documents_is_an_error() {
    let (item, schema, _) = jasmine_setup();
    let gw = Gateway::unlimited(Arc::new(ReplayBackend::new(Arc::new(FixtureStore::in_memory()))));
    let err = build_example_pool(&[item], &schema, Some(&gw), PoolMode::Llm).unwrap_err();
    assert_eq!(err.to_string(), "empty example pool");
}

#[test]
fn recorded_then_replayed_runs_are_identical() {
    let train = generate_synthetic(1, 8, &SyntheticShape::default());
    let test = generate_synthetic(2, 6, &SyntheticShape::default());
    let pools = build_example_pool(&train.items, &train.schema, None, PoolMode::Oracle).unwrap();
    let store = Arc::new(FixtureStore::in_memory());
    let record = Gateway::unlimited(Arc::new(CachingBackend::new(
        Arc::new(GoldBackend::new(test.schema.clone(), &test.items)),
        store.clone(),
    )));
    let docs: Vec<&Document> = test.items.iter().map(|i| &i.doc).collect();
    let mut config = RunConfig::new(test.schema.clone(), FixtureMode::Record);
    let recorded = run_corpus(&docs, &pools, &record, &config);
    config.mode = FixtureMode::Replay;
    let replay = Gateway::unlimited(Arc::new(ReplayBackend::new(store)));
    let sequential = run_corpus(&docs, &pools, &replay, &config);
    config.concurrency = 4;
    let concurrent = run_corpus(&docs, &pools, &replay, &config);
    for ((a, b), item) in recorded.iter().zip(&sequential).zip(&test.items) {
        assert_eq!(a.values, b.values);
        assert!(b.values.content_eq(&item.gold));
        assert!(b.flags.is_empty(), "{:?}", b.flags);
    }
    let canon = |rs: &[ExtractionResult]| rs.iter().map(ExtractionResult::canonical_json).collect::<Vec<_>>();
    assert_eq!(canon(&sequential), canon(&concurrent));
}

#[test]
fn infers_item_count_through_the_gateway() {
    let spec = ReceiptSpec {
        items: vec![ItemSpec::new(Some(2), 1), ItemSpec::new(Some(3), 0)],
        count_line: false,
    };
    let item = synthetic_receipt("count", &spec, 2);
    let schema = crate::corpus::bundled_schema(crate::corpus::DatasetName::Synthetic);
    let pools = build_example_pool(std::slice::from_ref(&item), &schema, None, PoolMode::Oracle).unwrap();
    let gw = gold_gateway(&schema, std::slice::from_ref(&item));
    let config = RunConfig::new(schema.clone(), FixtureMode::Oracle);
    let r = extract(&item.doc, &pools, &gw, &config);
    let registry = QueryRegistry::default();
    let got = infer_absent_value(&item.doc, &r, "line_item_count", &registry, &schema, &gw).unwrap();
    assert_eq!(got.as_count(), Some(5));
    assert!(infer_absent_value(&item.doc, &r, "tip", &registry, &schema, &gw).is_err());
    let junk = fn_gateway(|_| Ok("five".into()));
    let err = infer_absent_value(&item.doc, &r, "line_item_count", &registry, &schema, &junk).unwrap_err();
    assert!(err.to_string().starts_with("inference failure"));
}

#[test]
fn run_directory_layout() {
    let (item, schema, pools) = jasmine_setup();
    let gw = gold_gateway(&schema, std::slice::from_ref(&item));
    let config = RunConfig::new(schema, FixtureMode::Oracle);
    let r = extract(&item.doc, &pools, &gw, &config);
    let tmp = tempfile::tempdir().unwrap();
    let run = RunDir::create(tmp.path(), "r1").unwrap();
    run.write_config(&config).unwrap();
    run.write_result(&r).unwrap();
    let root = tmp.path().join("r1");
    assert!(root.join("config.json").is_file());
    assert!(root.join("results/jasmine.json").is_file());
    for stage in ["block_creator", "block_parser", "block_combiner"] {
        assert!(root.join("traces/jasmine").join(format!("{stage}.json")).is_file(), "{stage}");
    }
    assert!(root.join("fixtures").is_dir());
    let back = run.read_results().unwrap();
    assert_eq!(back[0].values, r.values);
    assert!(back[0].traces.is_empty());
}
