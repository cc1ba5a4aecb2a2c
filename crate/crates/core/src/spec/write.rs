use serde_json::{json, Map, Value as Json};

use super::*;

pub(super) fn to_document(spec: &ProvegaSpec) -> Json {
    let mut root = match &spec.base_view {
        Json::Object(m) => m.clone(),
        _ => Map::new(),
    };
    let index = spec.provega_index.min(root.len());
    root.shift_insert(index, "provega".into(), provega(spec));
    Json::Object(root)
}

fn provega(spec: &ProvegaSpec) -> Json {
    let p = &spec.progression;
    let mut chunking = Map::new();
    chunking.insert("type".into(), p.chunking.kind.as_str().into());
    if let Some(r) = &p.chunking.reading {
        let size = if r.auto_chunk_size {
            Json::from("auto")
        } else {
            Json::from(r.chunk_size)
        };
        chunking.insert(
            "reading".into(),
            json!({
                "method": r.method.as_str(),
                "chunk_size": size,
                "frequency": r.frequency_ms,
                "seed": r.seed,
            }),
        );
    }
    if let Some(proc_) = &p.chunking.processor {
        let mut m = Map::new();
        m.insert("name".into(), proc_.name.clone().into());
        m.extend(proc_.params.clone());
        chunking.insert("processor".into(), Json::Object(m));
    }

    let c = &p.control;
    let control = json!({
        "pause": c.pause_enabled,
        "stop": c.stop_enabled,
        "step": c.step_enabled,
        "mode": c.mode.as_str(),
        "min_rendering_frequency": c.min_rendering_frequency,
        "ack": { "enabled": c.ack_flow_control, "window": c.ack_window },
    });

    let m = &p.monitoring;
    let mut quality = Map::new();
    for (k, b) in m.quality.iter() {
        quality.insert(k.into(), binding(b));
    }
    let monitoring = json!({
        "aliveness": m.aliveness,
        "progress": m.progress,
        "etc": m.etc,
        "quality": quality,
        "change": {
            "mark": highlight(&m.change.mark),
            "area": highlight(&m.change.area),
        },
    });

    let mut out = Map::new();
    out.insert(
        "progression".into(),
        json!({ "chunking": chunking, "control": control, "monitoring": monitoring }),
    );
    out.insert(
        "visualization".into(),
        json!({ "visual_stability": spec.visualization.visual_stability }),
    );
    if let Some(i) = &spec.interaction {
        out.insert("interaction".into(), i.clone());
    }
    if let Some(g) = &spec.guidance {
        out.insert("guidance".into(), g.clone());
    }
    Json::Object(out)
}

fn binding(b: &Binding) -> Json {
    match b {
        Binding::Off => "off".into(),
        Binding::Builtin => "builtin".into(),
        Binding::Field(f) => json!({ "field": f }),
    }
}

fn highlight(h: &Highlight) -> Json {
    json!({ "enabled": h.enabled, "highlight_duration": h.highlight_duration })
}
