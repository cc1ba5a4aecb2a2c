use proptest::prelude::*;
use serde_json::json;

use super::*;
use crate::data_source::{load_complete, DataSourceDescriptor};

fn doc(provega: Json) -> String {
    json!({
        "$schema": "https://vega.github.io/schema/vega-lite/v5.json",
        "data": {"name": "source"},
        "mark": "point",
        "encoding": {"x": {"field": "x", "type": "quantitative"}, "y": {"field": "y"}},
        "provega": provega
    })
    .to_string()
}

fn err_path(document: &str) -> String {
    parse_spec(document)
        .unwrap_err()
        .path()
        .expect("error carries a path")
        .to_owned()
}

#[test]
fn minimal_spec_gets_defaults() {
    let spec = parse_spec(&doc(json!({"progression": {"chunking": {
        "type": "data",
        "reading": {"method": "ascending", "chunk_size": 2, "frequency": 250}
    }}})))
    .unwrap();
    assert_eq!(spec.control().mode, Mode::Monitoring);
    assert_eq!(spec.control().ack_window, 1);
    assert!(!spec.control().ack_flow_control);
    assert!(spec.visualization.visual_stability);
    let reading = spec.chunking().reading.as_ref().unwrap();
    assert_eq!(reading.chunk_size, 2);
    assert_eq!(reading.frequency_ms, 250);
    assert!(!reading.auto_chunk_size);
    let change = &spec.monitoring().change;
    assert!(!change.mark.enabled && !change.area.enabled);
    assert_eq!(change.mark.highlight_duration, 600);
    assert!(spec.monitoring().quality.iter().all(|(_, b)| *b == Binding::Off));
}

#[test]
fn missing_provega_block() {
    let err = parse_spec(r#"{"mark": "point"}"#).unwrap_err();
    assert_eq!(
        err,
        SpecError::Validation {
            path: "provega".into(),
            message: "provega block required".into()
        }
    );
    assert!(err.to_string().contains("provega block required"));
}

#[test]
fn syntax_error_has_position() {
    match parse_spec("{\n  \"provega\": ,\n}") {
        Err(SpecError::Syntax { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_spec("[1]"), Err(SpecError::Validation { .. })));
}

#[test]
fn mixed_kmeans_resolves_processor() {
    let spec = parse_spec(&doc(json!({"progression": {"chunking": {
        "type": "mixed",
        "reading": {"chunk_size": 10},
        "processor": {"name": "kmeans", "k": 3}
    }}})))
    .unwrap();
    let p = spec.chunking().processor.as_ref().unwrap();
    assert_eq!(p.name, "kmeans");
    assert_eq!(p.params["k"], 3);
    assert_eq!(p.params["max_iterations"], 100);
    assert!(crate::processors::build(p, crate::processors::ProcessorMode::Incremental).is_ok());
}

#[test]
fn processor_errors() {
    let missing = parse_spec(&doc(json!({"progression": {"chunking": {"type": "process"}}})));
    assert_eq!(
        missing.unwrap_err(),
        SpecError::MissingProcessor {
            path: "provega.progression.chunking.processor".into(),
            kind: ChunkingType::Process
        }
    );
    assert_eq!(
        err_path(&doc(json!({"progression": {"chunking": {
            "type": "process", "processor": {"name": "tsne"}
        }}}))),
        "provega.progression.chunking.processor.name"
    );
    assert_eq!(
        err_path(&doc(json!({"progression": {"chunking": {
            "type": "process", "processor": {"name": "kmeans", "k": 0}
        }}}))),
        "provega.progression.chunking.processor.k"
    );
    assert_eq!(
        err_path(&doc(json!({"progression": {"chunking": {
            "type": "data", "processor": {"name": "kmeans", "k": 2}
        }}}))),
        "provega.progression.chunking.processor"
    );
}

#[test]
fn unknown_keys_report_paths() {
    let cases = [
        (json!({"progresion": {}}), "provega.progresion"),
        (
            json!({"progression": {"chunking": {"reading": {"size": 2}}}}),
            "provega.progression.chunking.reading.size",
        ),
        (
            json!({"progression": {"control": {"ack": {"windw": 2}}}}),
            "provega.progression.control.ack.windw",
        ),
        (
            json!({"progression": {"monitoring": {"quality": {"speed": true}}}}),
            "provega.progression.monitoring.quality.speed",
        ),
        (
            json!({"visualization": {"visual_stability": "yes"}}),
            "provega.visualization.visual_stability",
        ),
        (
            json!({"progression": {"chunking": {"reading": {"frequency": 0}}}}),
            "provega.progression.chunking.reading.frequency",
        ),
        (
            json!({"progression": {"control": {"min_rendering_frequency": 0}}}),
            "provega.progression.control.min_rendering_frequency",
        ),
        (
            json!({"progression": {"control": {"mode": "exploration", "step": false}}}),
            "provega.progression.control.step",
        ),
    ];
    for (block, path) in cases {
        assert_eq!(err_path(&doc(block)), path);
    }
}

#[test]
fn exploration_enables_stepping() {
    let spec = parse_spec(&doc(
        json!({"progression": {"control": {"mode": "exploration"}}}),
    ))
    .unwrap();
    assert!(spec.control().step_enabled);
    assert_eq!(spec.control().mode, Mode::Exploration);
}

#[test]
fn random_without_seed_warns() {
    let (spec, warnings) = parse::parse_spec_report(&doc(json!({"progression": {"chunking": {
        "reading": {"method": "random"}
    }}})))
    .unwrap();
    assert_eq!(spec.chunking().reading.as_ref().unwrap().seed, 0);
    assert_eq!(warnings.len(), 1);
    assert_eq!(warnings[0].path, "provega.progression.chunking.reading.seed");
}

#[test]
fn websocket_input_rules() {
    let ws = |chunking: Json| {
        json!({
            "data": {"url": "ws://localhost:9000"},
            "mark": "point",
            "provega": {"progression": {"chunking": chunking}}
        })
        .to_string()
    };
    let spec = parse_spec(&ws(json!({"type": "data"}))).unwrap();
    assert!(spec.is_progressive_input());
    assert!(spec.chunking().reading.is_none());
    assert_eq!(
        err_path(&ws(json!({"reading": {"chunk_size": 2}}))),
        "provega.progression.chunking.reading"
    );
    assert_eq!(
        err_path(&ws(json!({"type": "process", "processor": {"name": "kmeans", "k": 2}}))),
        "provega.progression.chunking.type"
    );
}

#[test]
fn bindings_and_highlights() {
    let spec = parse_spec(&doc(json!({"progression": {"monitoring": {
        "quality": {
            "absolute_progress": true,
            "relative_progress": "builtin",
            "stability": {"field": "stab"},
            "certainty": "ci_width_inv"
        },
        "change": {"mark": true, "area": {"highlight_duration": 900}}
    }}})))
    .unwrap();
    let q = &spec.monitoring().quality;
    assert_eq!(q.absolute_progress, Binding::Builtin);
    assert_eq!(q.relative_progress, Binding::Builtin);
    assert_eq!(q.stability, Binding::Field("stab".into()));
    assert_eq!(q.certainty, Binding::Field("ci_width_inv".into()));
    let c = &spec.monitoring().change;
    assert!(c.mark.enabled);
    assert_eq!(c.mark.highlight_duration, 600);
    assert!(c.area.enabled);
    assert_eq!(c.area.highlight_duration, 900);
}

#[test]
fn host_document_passes_through() {
    let source = r#"{"$schema":"v5","data":{"values":[{"a":1}]},"provega":{"guidance":{"future":[1,2]},"interaction":{"brush":true}},"mark":{"type":"bar","weird_key":1.5},"usermeta":{"z":null}}"#;
    let spec = parse_spec(source).unwrap();
    let mut host: Json = serde_json::from_str(source).unwrap();
    host.as_object_mut().unwrap().shift_remove("provega");
    assert_eq!(spec.base_view, host);
    assert_eq!(spec.guidance, Some(json!({"future": [1, 2]})));
    assert_eq!(spec.interaction, Some(json!({"brush": true})));

    // The block is written back where it was found.
    let written = spec.to_document();
    let keys: Vec<&String> = written.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["$schema", "data", "provega", "mark", "usermeta"]);
    assert_eq!(written["provega"]["guidance"], json!({"future": [1, 2]}));
}

#[test]
fn encodings_fall_back_to_layers() {
    let spec = parse_spec(
        &json!({
            "layer": [{"mark": "rule"}, {"mark": "point", "encoding": {"x": {"field": "lon", "type": "quantitative"}, "y": {"field": "lat", "type": "nominal"}}}],
            "provega": {}
        })
        .to_string(),
    )
    .unwrap();
    let enc = spec.encodings();
    assert_eq!(enc.x.as_ref().unwrap().field, "lon");
    assert!(enc.x.unwrap().is_numeric());
    assert!(!enc.y.unwrap().is_numeric());
}

#[test]
fn default_spec_chunk_sizes() {
    let inline = |n: usize| {
        DataSourceDescriptor::inline((0..n).map(|i| json!({"v": i})).collect())
    };
    let spec = default_spec_for(&inline(500));
    let reading = spec.chunking().reading.as_ref().unwrap();
    assert_eq!((reading.chunk_size, reading.frequency_ms), (5, 250));
    assert_eq!(reading.method, ReadingMethod::Ascending);
    assert_eq!(spec.chunking().kind, ChunkingType::Data);
    assert_eq!(
        default_spec_for(&inline(3)).chunking().reading.as_ref().unwrap().chunk_size,
        1
    );
    assert_eq!(
        default_spec_for(&inline(101)).chunking().reading.as_ref().unwrap().chunk_size,
        2
    );
    // The default document parses back to itself.
    assert_eq!(parse_spec(&spec.to_json_string()).unwrap(), spec);
}

#[test]
fn default_spec_for_file_resolves_at_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rows.csv");
    let mut text = String::from("x,y\n");
    for i in 0..250 {
        text.push_str(&format!("{i},{}\n", i * 2));
    }
    std::fs::write(&path, text).unwrap();
    let source = DataSourceDescriptor::file(&path);
    let spec = default_spec_for(&source);
    let mut reading = spec.chunking().reading.clone().unwrap();
    assert_eq!(reading.chunk_size, 1);
    assert!(reading.auto_chunk_size);

    let data = load_complete(&source).unwrap();
    reading.resolve_chunk_size(data.len());
    assert_eq!(reading.chunk_size, 250usize.div_ceil(100));
}

#[test]
fn validate_against_overridden_source() {
    let spec = parse_spec(&doc(json!({}))).unwrap();
    let ws = DataSourceDescriptor::websocket("ws://127.0.0.1:1");
    assert!(spec.validate_for_source(&ws).is_err());
    let adapted = spec.adapted_to(&ws);
    assert!(adapted.validate_for_source(&ws).is_ok());
}

fn arb_binding() -> impl Strategy<Value = Json> {
    prop_oneof![
        Just(json!(true)),
        Just(json!(false)),
        Just(json!("builtin")),
        "[a-z]{1,6}".prop_map(|f| json!({"field": f})),
    ]
}

fn arb_provega() -> impl Strategy<Value = Json> {
    let reading = (
        prop::option::of(prop_oneof![
            Just("ascending"),
            Just("descending"),
            Just("random")
        ]),
        prop::option::of(1u64..10_000),
        prop::option::of(1u64..5_000),
        prop::option::of(any::<u64>()),
    )
        .prop_map(|(method, size, freq, seed)| {
            let mut m = Map::new();
            if let Some(v) = method {
                m.insert("method".into(), json!(v));
            }
            if let Some(v) = size {
                m.insert("chunk_size".into(), json!(v));
            }
            if let Some(v) = freq {
                m.insert("frequency".into(), json!(v));
            }
            if let Some(v) = seed {
                m.insert("seed".into(), json!(v));
            }
            Json::Object(m)
        });
    let chunking = (0..3u8, reading, 1u64..9, any::<u64>()).prop_map(|(t, reading, k, seed)| {
        match t {
            0 => json!({"type": "data", "reading": reading}),
            1 => json!({"type": "process", "processor": {"name": "kmeans", "k": k, "seed": seed}}),
            _ => json!({"type": "mixed", "reading": reading,
                        "processor": {"name": "density", "bins_x": k, "bins_y": k + 1}}),
        }
    });
    let control = (
        prop::option::of(any::<bool>()),
        prop::option::of(any::<bool>()),
        any::<bool>(),
        prop::option::of(1u64..2_000),
        prop::option::of((any::<bool>(), 1u64..8)),
    )
        .prop_map(|(pause, stop, explore, mrf, ack)| {
            let mut m = Map::new();
            if let Some(v) = pause {
                m.insert("pause".into(), json!(v));
            }
            if let Some(v) = stop {
                m.insert("stop".into(), json!(v));
            }
            if explore {
                m.insert("mode".into(), json!("exploration"));
            }
            if let Some(v) = mrf {
                m.insert("min_rendering_frequency".into(), json!(v));
            }
            if let Some((enabled, window)) = ack {
                m.insert("ack".into(), json!({"enabled": enabled, "window": window}));
            }
            Json::Object(m)
        });
    let monitoring = (
        any::<bool>(),
        arb_binding(),
        arb_binding(),
        prop::option::of(0u64..5_000),
    )
        .prop_map(|(alive, abs, stab, dur)| {
            let mut change = json!({"mark": true});
            if let Some(d) = dur {
                change["area"] = json!({"highlight_duration": d});
            }
            json!({"aliveness": alive, "quality": {"absolute_progress": abs, "stability": stab},
                   "change": change})
        });
    (chunking, control, monitoring, any::<bool>()).prop_map(|(ch, co, mo, vs)| {
        json!({
            "progression": {"chunking": ch, "control": co, "monitoring": mo},
            "visualization": {"visual_stability": vs},
            "guidance": {"reserved": true}
        })
    })
}

/// Every leaf path under `v`, as key sequences.
fn leaves(v: &Json, prefix: Vec<String>, out: &mut Vec<(Vec<String>, Json)>) {
    match v {
        Json::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                let mut p = prefix.clone();
                p.push(k.clone());
                leaves(child, p, out);
            }
        }
        Json::Object(_) => {}
        _ => out.push((prefix, v.clone())),
    }
}

fn lookup<'a>(v: &'a Json, path: &[String]) -> Option<&'a Json> {
    path.iter().try_fold(v, |v, k| v.get(k))
}

proptest! {
    #[test]
    fn normalization_is_idempotent(block in arb_provega()) {
        let spec = parse_spec(&doc(block)).unwrap();
        let once = spec.to_json_string();
        let again = parse_spec(&once).unwrap();
        prop_assert_eq!(&again, &spec);
        prop_assert_eq!(again.to_json_string(), once);
    }

    #[test]
    fn explicit_values_survive(block in arb_provega()) {
        let spec = parse_spec(&doc(block.clone())).unwrap();
        let written = spec.to_document();
        let mut explicit = Vec::new();
        leaves(&block, vec![], &mut explicit);
        for (path, value) in explicit {
            let found = lookup(&written["provega"], &path);
            // Bindings and highlights are written in canonical form.
            let (found, canonical) = match (&path[..], &value) {
                ([.., q], Json::Bool(true)) if q.ends_with("progress") || q == "stability" => (found, json!("builtin")),
                ([.., q], Json::Bool(false)) if q.ends_with("progress") || q == "stability" => (found, json!("off")),
                ([.., q], Json::Bool(_)) if q == "mark" || q == "area" => (found.and_then(|h| h.get("enabled")), value.clone()),
                _ => (found, value.clone()),
            };
            prop_assert_eq!(found, Some(&canonical), "path {:?}", path);
        }
    }

    #[test]
    fn mutated_keys_are_rejected(block in arb_provega(), pick in any::<prop::sample::Index>(), suffix in "[a-z_]{1,4}") {
        let mut objects = Vec::new();
        fn collect(v: &Json, prefix: Vec<String>, out: &mut Vec<Vec<String>>) {
            if let Json::Object(m) = v {
                if prefix.first().is_some_and(|k| k == "guidance") {
                    return;
                }
                out.push(prefix.clone());
                for (k, child) in m {
                    let mut p = prefix.clone();
                    p.push(k.clone());
                    collect(child, p, out);
                }
            }
        }
        collect(&block, vec![], &mut objects);
        let target = pick.get(&objects).clone();
        let mut mutated = block.clone();
        let mut obj = &mut mutated;
        for k in &target {
            obj = obj.get_mut(k).unwrap();
        }
        let map = obj.as_object_mut().unwrap();
        let bogus = format!("zz{suffix}");
        map.insert(bogus.clone(), json!(1));

        let mut expected = String::from("provega");
        for k in &target {
            expected.push('.');
            expected.push_str(k);
        }
        expected.push('.');
        expected.push_str(&bogus);
        prop_assert_eq!(err_path(&doc(mutated)), expected);
    }

    #[test]
    fn arbitrary_text_never_panics(text in ".{0,200}") {
        let _ = parse_spec(&text);
    }
}
