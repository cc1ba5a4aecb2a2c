use serde_json::{Map, Value as Json};

use super::*;
use crate::processors;

/// A non-fatal finding of validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Warning {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Parses and normalizes a specification document.
pub fn parse_spec(document: &str) -> Result<ProvegaSpec, SpecError> {
    parse_spec_report(document).map(|(spec, _)| spec)
}

/// Like [`parse_spec`], also returning validation warnings.
pub fn parse_spec_report(document: &str) -> Result<(ProvegaSpec, Vec<Warning>), SpecError> {
    let root: Json = serde_json::from_str(document).map_err(|e| SpecError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let Json::Object(mut root) = root else {
        return Err(SpecError::validation("$", "document must be an object"));
    };
    let Some(provega_index) = root.keys().position(|k| k == "provega") else {
        return Err(SpecError::validation("provega", "provega block required"));
    };
    let provega = root
        .shift_remove("provega")
        .expect("index lookup just found the key");
    let base_view = Json::Object(root);
    let progressive = host_url(&base_view).is_some_and(is_ws_url);

    let mut warnings = Vec::new();
    let block = Obj::new("provega", &provega)?;
    block.check_keys(&["progression", "visualization", "interaction", "guidance"])?;

    let progression = match block.object("progression")? {
        Some(p) => progression(&p, progressive, &mut warnings)?,
        None => progression(&Obj::empty("provega.progression"), progressive, &mut warnings)?,
    };

    let mut visualization = VisualizationConfig::default();
    if let Some(v) = block.object("visualization")? {
        v.check_keys(&["visual_stability"])?;
        if let Some(b) = v.bool("visual_stability")? {
            visualization.visual_stability = b;
        }
    }

    Ok((
        ProvegaSpec {
            base_view,
            progression,
            visualization,
            interaction: block.get("interaction").cloned(),
            guidance: block.get("guidance").cloned(),
            provega_index,
        },
        warnings,
    ))
}

fn progression(
    p: &Obj<'_>,
    progressive: bool,
    warnings: &mut Vec<Warning>,
) -> Result<ProgressionConfig, SpecError> {
    p.check_keys(&["chunking", "control", "monitoring"])?;
    let chunking = match p.object("chunking")? {
        Some(c) => chunking(&c, progressive, warnings)?,
        None => chunking(&p.empty_child("chunking"), progressive, warnings)?,
    };
    let control = match p.object("control")? {
        Some(c) => control(&c)?,
        None => ControlConfig::default(),
    };
    let monitoring = match p.object("monitoring")? {
        Some(m) => monitoring(&m)?,
        None => MonitoringConfig::default(),
    };
    Ok(ProgressionConfig {
        chunking,
        control,
        monitoring,
    })
}

fn chunking(
    c: &Obj<'_>,
    progressive: bool,
    warnings: &mut Vec<Warning>,
) -> Result<ChunkingConfig, SpecError> {
    c.check_keys(&["type", "reading", "processor"])?;
    let kind = match c.string("type")? {
        None | Some("data") => ChunkingType::Data,
        Some("process") => ChunkingType::Process,
        Some("mixed") => ChunkingType::Mixed,
        Some(other) => {
            return Err(SpecError::validation(
                c.child_path("type"),
                format!("unknown chunking type `{other}` (expected data, process or mixed)"),
            ))
        }
    };

    let processor = match c.get("processor") {
        None => None,
        Some(_) => {
            let p = c.object("processor")?.expect("key is present");
            Some(processor(&p)?)
        }
    };
    match (kind, &processor) {
        (ChunkingType::Process | ChunkingType::Mixed, None) => {
            return Err(SpecError::MissingProcessor {
                path: c.child_path("processor"),
                kind,
            })
        }
        (ChunkingType::Data, Some(_)) => {
            return Err(SpecError::validation(
                c.child_path("processor"),
                "a processor is only valid with process or mixed chunking",
            ))
        }
        _ => {}
    }

    let reading = match c.object("reading")? {
        Some(_) if progressive => {
            return Err(SpecError::validation(
                c.child_path("reading"),
                "reading is not allowed with a progressive (WebSocket) input",
            ))
        }
        Some(r) => Some(reading(&r, warnings)?),
        None if progressive => None,
        None => Some(ReadingConfig::auto()),
    };
    if progressive && kind == ChunkingType::Process {
        return Err(SpecError::validation(
            c.child_path("type"),
            "process chunking requires a complete input",
        ));
    }

    Ok(ChunkingConfig {
        kind,
        reading,
        processor,
    })
}

fn reading(r: &Obj<'_>, warnings: &mut Vec<Warning>) -> Result<ReadingConfig, SpecError> {
    r.check_keys(&["method", "chunk_size", "frequency", "seed"])?;
    let mut cfg = ReadingConfig::auto();
    cfg.method = match r.string("method")? {
        None | Some("ascending") => ReadingMethod::Ascending,
        Some("descending") => ReadingMethod::Descending,
        Some("random") => ReadingMethod::Random,
        Some(other) => {
            return Err(SpecError::validation(
                r.child_path("method"),
                format!("unknown reading method `{other}` (expected ascending, descending or random)"),
            ))
        }
    };
    match r.get("chunk_size") {
        None => {}
        Some(Json::String(s)) if s == "auto" => {}
        Some(_) => {
            let size = r.uint("chunk_size", 1)?.expect("key is present");
            cfg.chunk_size = usize::try_from(size)
                .map_err(|_| SpecError::validation(r.child_path("chunk_size"), "too large"))?;
            cfg.auto_chunk_size = false;
        }
    }
    if let Some(f) = r.uint("frequency", 1)? {
        cfg.frequency_ms = f;
    }
    match r.uint("seed", 0)? {
        Some(seed) => cfg.seed = seed,
        None if cfg.method == ReadingMethod::Random => warnings.push(Warning {
            path: r.child_path("seed"),
            message: "random reading without a seed; using seed 0".into(),
        }),
        None => {}
    }
    Ok(cfg)
}

fn processor(p: &Obj<'_>) -> Result<ProcessorSpec, SpecError> {
    let name = p
        .string("name")?
        .ok_or_else(|| SpecError::validation(p.child_path("name"), "processor name required"))?;
    let Some(kind) = processors::lookup(name) else {
        return Err(SpecError::validation(
            p.child_path("name"),
            format!(
                "unknown processor `{name}` (registered: {})",
                processors::names().join(", ")
            ),
        ));
    };
    let mut params = p.map.clone().into_owned();
    params.shift_remove("name");
    let params = (kind.normalize)(&params)
        .map_err(|e| SpecError::validation(p.child_path(&e.key), e.message))?;
    Ok(ProcessorSpec {
        name: name.to_owned(),
        params,
    })
}

fn control(c: &Obj<'_>) -> Result<ControlConfig, SpecError> {
    c.check_keys(&["pause", "stop", "step", "mode", "min_rendering_frequency", "ack"])?;
    let mut cfg = ControlConfig::default();
    if let Some(b) = c.bool("pause")? {
        cfg.pause_enabled = b;
    }
    if let Some(b) = c.bool("stop")? {
        cfg.stop_enabled = b;
    }
    cfg.mode = match c.string("mode")? {
        None | Some("monitoring") => Mode::Monitoring,
        Some("exploration") => Mode::Exploration,
        Some(other) => {
            return Err(SpecError::validation(
                c.child_path("mode"),
                format!("unknown mode `{other}` (expected monitoring or exploration)"),
            ))
        }
    };
    match (c.bool("step")?, cfg.mode) {
        (Some(false), Mode::Exploration) => {
            return Err(SpecError::validation(
                c.child_path("step"),
                "exploration mode requires stepping",
            ))
        }
        (Some(b), _) => cfg.step_enabled = b,
        (None, Mode::Exploration) => cfg.step_enabled = true,
        (None, Mode::Monitoring) => {}
    }
    match c.get("min_rendering_frequency") {
        None | Some(Json::Null) => {}
        Some(_) => cfg.min_rendering_frequency = c.uint("min_rendering_frequency", 1)?,
    }
    match c.get("ack") {
        None => {}
        Some(Json::Bool(b)) => cfg.ack_flow_control = *b,
        Some(_) => {
            let ack = c.object("ack")?.expect("key is present");
            ack.check_keys(&["enabled", "window"])?;
            cfg.ack_flow_control = ack.bool("enabled")?.unwrap_or(true);
            if let Some(w) = ack.uint("window", 1)? {
                cfg.ack_window = u32::try_from(w)
                    .map_err(|_| SpecError::validation(ack.child_path("window"), "too large"))?;
            }
        }
    }
    Ok(cfg)
}

fn monitoring(m: &Obj<'_>) -> Result<MonitoringConfig, SpecError> {
    m.check_keys(&["aliveness", "progress", "etc", "quality", "change"])?;
    let mut cfg = MonitoringConfig::default();
    if let Some(b) = m.bool("aliveness")? {
        cfg.aliveness = b;
    }
    if let Some(b) = m.bool("progress")? {
        cfg.progress = b;
    }
    if let Some(b) = m.bool("etc")? {
        cfg.etc = b;
    }
    if let Some(q) = m.object("quality")? {
        q.check_keys(&["absolute_progress", "relative_progress", "stability", "certainty"])?;
        let b = &mut cfg.quality;
        for (key, slot) in [
            ("absolute_progress", &mut b.absolute_progress),
            ("relative_progress", &mut b.relative_progress),
            ("stability", &mut b.stability),
            ("certainty", &mut b.certainty),
        ] {
            if let Some(v) = q.get(key) {
                *slot = binding(&q.child_path(key), v)?;
            }
        }
    }
    if let Some(c) = m.object("change")? {
        c.check_keys(&["mark", "area"])?;
        if let Some(v) = c.get("mark") {
            cfg.change.mark = highlight(&c.child_path("mark"), v)?;
        }
        if let Some(v) = c.get("area") {
            cfg.change.area = highlight(&c.child_path("area"), v)?;
        }
    }
    Ok(cfg)
}

fn binding(path: &str, v: &Json) -> Result<Binding, SpecError> {
    match v {
        Json::Bool(true) => Ok(Binding::Builtin),
        Json::Bool(false) => Ok(Binding::Off),
        Json::String(s) if s == "off" => Ok(Binding::Off),
        Json::String(s) if s == "builtin" => Ok(Binding::Builtin),
        Json::String(s) if !s.is_empty() => Ok(Binding::Field(s.clone())),
        Json::Object(_) => {
            let o = Obj::new(path, v)?;
            o.check_keys(&["field"])?;
            match o.string("field")? {
                Some(f) if !f.is_empty() => Ok(Binding::Field(f.to_owned())),
                _ => Err(SpecError::validation(
                    o.child_path("field"),
                    "expected a non-empty field name",
                )),
            }
        }
        _ => Err(SpecError::validation(
            path,
            "expected a boolean, \"off\", \"builtin\", a field name or {\"field\": name}",
        )),
    }
}

fn highlight(path: &str, v: &Json) -> Result<Highlight, SpecError> {
    let mut h = Highlight::default();
    match v {
        Json::Bool(b) => h.enabled = *b,
        _ => {
            let o = Obj::new(path, v)?;
            o.check_keys(&["enabled", "highlight_duration"])?;
            h.enabled = o.bool("enabled")?.unwrap_or(true);
            if let Some(d) = o.uint("highlight_duration", 0)? {
                h.highlight_duration = d;
            }
        }
    }
    Ok(h)
}

/// An object being validated, with its dotted path.
struct Obj<'a> {
    path: String,
    map: std::borrow::Cow<'a, Map<String, Json>>,
}

impl<'a> Obj<'a> {
    fn new(path: &str, v: &'a Json) -> Result<Self, SpecError> {
        match v {
            Json::Object(map) => Ok(Obj {
                path: path.to_owned(),
                map: std::borrow::Cow::Borrowed(map),
            }),
            other => Err(SpecError::validation(
                path,
                format!("expected an object, found {}", kind_of(other)),
            )),
        }
    }

    fn empty(path: &str) -> Obj<'static> {
        Obj {
            path: path.to_owned(),
            map: std::borrow::Cow::Owned(Map::new()),
        }
    }

    fn empty_child(&self, key: &str) -> Obj<'static> {
        Obj::empty(&self.child_path(key))
    }

    fn child_path(&self, key: &str) -> String {
        format!("{}.{key}", self.path)
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<(), SpecError> {
        match self.map.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(SpecError::validation(
                self.child_path(k),
                format!("unknown property (allowed: {})", allowed.join(", ")),
            )),
            None => Ok(()),
        }
    }

    fn get(&self, key: &str) -> Option<&Json> {
        self.map.get(key)
    }

    fn object(&self, key: &str) -> Result<Option<Obj<'_>>, SpecError> {
        self.get(key)
            .map(|v| Obj::new(&self.child_path(key), v))
            .transpose()
    }

    fn bool(&self, key: &str) -> Result<Option<bool>, SpecError> {
        match self.get(key) {
            None => Ok(None),
            Some(Json::Bool(b)) => Ok(Some(*b)),
            Some(other) => Err(self.wrong_type(key, "a boolean", other)),
        }
    }

    fn string(&self, key: &str) -> Result<Option<&str>, SpecError> {
        match self.get(key) {
            None => Ok(None),
            Some(Json::String(s)) => Ok(Some(s)),
            Some(other) => Err(self.wrong_type(key, "a string", other)),
        }
    }

    fn uint(&self, key: &str, min: u64) -> Result<Option<u64>, SpecError> {
        match self.get(key) {
            None => Ok(None),
            Some(Json::Number(n)) => match n.as_u64() {
                Some(v) if v >= min => Ok(Some(v)),
                Some(v) => Err(SpecError::validation(
                    self.child_path(key),
                    format!("must be at least {min}, found {v}"),
                )),
                None => Err(SpecError::validation(
                    self.child_path(key),
                    format!("expected a non-negative integer, found {n}"),
                )),
            },
            Some(other) => Err(self.wrong_type(key, "an integer", other)),
        }
    }

    fn wrong_type(&self, key: &str, expected: &str, found: &Json) -> SpecError {
        SpecError::validation(
            self.child_path(key),
            format!("expected {expected}, found {}", kind_of(found)),
        )
    }
}

pub(crate) fn kind_of(v: &Json) -> &'static str {
    match v {
        Json::Null => "null",
        Json::Bool(_) => "a boolean",
        Json::Number(_) => "a number",
        Json::String(_) => "a string",
        Json::Array(_) => "an array",
        Json::Object(_) => "an object",
    }
}
