//! The `provega` specification model.
//!
//! A specification document is a visualization document with one extra
//! top-level object, `provega`. Everything outside that object is carried
//! through untouched as [`ProvegaSpec::base_view`]; everything inside it is
//! validated strictly and normalized so that every property has a value.

mod parse;
mod write;

use serde_json::{Map, Value as Json};

pub use parse::{parse_spec, parse_spec_report, Warning};

use crate::data_source::DataSourceDescriptor;

pub const DEFAULT_FREQUENCY_MS: u64 = 250;
pub const DEFAULT_HIGHLIGHT_MS: u64 = 600;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Validation { path: String, message: String },
    #[error("{path}: chunking type `{kind}` requires a processor")]
    MissingProcessor { path: String, kind: ChunkingType },
}

impl SpecError {
    pub(crate) fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        SpecError::Validation {
            path: path.into(),
            message: message.into(),
        }
    }

    /// The property path the error points at, if any.
    pub fn path(&self) -> Option<&str> {
        match self {
            SpecError::Syntax { .. } => None,
            SpecError::Validation { path, .. } | SpecError::MissingProcessor { path, .. } => {
                Some(path)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProvegaSpec {
    /// The host document with the `provega` key removed.
    pub base_view: Json,
    pub progression: ProgressionConfig,
    pub visualization: VisualizationConfig,
    /// Reserved block, retained verbatim.
    pub interaction: Option<Json>,
    /// Reserved block, retained verbatim.
    pub guidance: Option<Json>,
    /// Position of `provega` among the top-level keys of the source document.
    pub(crate) provega_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProgressionConfig {
    pub chunking: ChunkingConfig,
    pub control: ControlConfig,
    pub monitoring: MonitoringConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkingType {
    Data,
    Process,
    Mixed,
}

impl ChunkingType {
    pub fn as_str(self) -> &'static str {
        match self {
            ChunkingType::Data => "data",
            ChunkingType::Process => "process",
            ChunkingType::Mixed => "mixed",
        }
    }

    pub fn ingests_data(self) -> bool {
        matches!(self, ChunkingType::Data | ChunkingType::Mixed)
    }
}

impl std::fmt::Display for ChunkingType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkingConfig {
    pub kind: ChunkingType,
    /// Present exactly when the engine chunks a complete input itself.
    pub reading: Option<ReadingConfig>,
    pub processor: Option<ProcessorSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadingMethod {
    Ascending,
    Descending,
    Random,
}

impl ReadingMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ReadingMethod::Ascending => "ascending",
            ReadingMethod::Descending => "descending",
            ReadingMethod::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReadingConfig {
    pub method: ReadingMethod,
    /// Rows per chunk. A placeholder of 1 while `auto_chunk_size` is unresolved.
    pub chunk_size: usize,
    /// Chunk size is derived from the row count (`ceil(n / 100)`) at load time.
    pub auto_chunk_size: bool,
    pub frequency_ms: u64,
    pub seed: u64,
}

impl ReadingConfig {
    pub fn auto() -> Self {
        Self {
            method: ReadingMethod::Ascending,
            chunk_size: 1,
            auto_chunk_size: true,
            frequency_ms: DEFAULT_FREQUENCY_MS,
            seed: 0,
        }
    }

    /// Fixes an automatic chunk size for a dataset of `rows` rows.
    pub fn resolve_chunk_size(&mut self, rows: usize) {
        if self.auto_chunk_size {
            self.chunk_size = default_chunk_size(rows);
            self.auto_chunk_size = false;
        }
    }
}

/// `ceil(n / 100)`, never below one.
pub fn default_chunk_size(rows: usize) -> usize {
    rows.div_ceil(100).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessorSpec {
    pub name: String,
    /// Normalized parameters (defaults filled), excluding `name`.
    pub params: Map<String, Json>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Monitoring,
    Exploration,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Monitoring => "monitoring",
            Mode::Exploration => "exploration",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlConfig {
    pub pause_enabled: bool,
    pub stop_enabled: bool,
    pub step_enabled: bool,
    pub mode: Mode,
    pub min_rendering_frequency: Option<u64>,
    pub ack_flow_control: bool,
    pub ack_window: u32,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            pause_enabled: true,
            stop_enabled: true,
            step_enabled: false,
            mode: Mode::Monitoring,
            min_rendering_frequency: None,
            ack_flow_control: false,
            ack_window: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Binding {
    Off,
    Builtin,
    Field(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QualityBindings {
    pub absolute_progress: Binding,
    pub relative_progress: Binding,
    pub stability: Binding,
    pub certainty: Binding,
}

impl Default for QualityBindings {
    fn default() -> Self {
        Self {
            absolute_progress: Binding::Off,
            relative_progress: Binding::Off,
            stability: Binding::Off,
            certainty: Binding::Off,
        }
    }
}

impl QualityBindings {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Binding)> {
        [
            ("absolute_progress", &self.absolute_progress),
            ("relative_progress", &self.relative_progress),
            ("stability", &self.stability),
            ("certainty", &self.certainty),
        ]
        .into_iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Highlight {
    pub enabled: bool,
    pub highlight_duration: u64,
}

impl Default for Highlight {
    fn default() -> Self {
        Self {
            enabled: false,
            highlight_duration: DEFAULT_HIGHLIGHT_MS,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChangeConfig {
    pub mark: Highlight,
    pub area: Highlight,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MonitoringConfig {
    pub aliveness: bool,
    pub progress: bool,
    pub etc: bool,
    pub quality: QualityBindings,
    pub change: ChangeConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisualizationConfig {
    pub visual_stability: bool,
}

impl Default for VisualizationConfig {
    fn default() -> Self {
        Self {
            visual_stability: true,
        }
    }
}

/// A positional channel of the host view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelField {
    pub field: String,
    /// The channel's declared measurement type, if any.
    pub kind: Option<String>,
}

impl ChannelField {
    pub fn is_numeric(&self) -> bool {
        matches!(self.kind.as_deref(), None | Some("quantitative"))
    }
}

/// The x/y field encodings of the host view.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Encodings {
    pub x: Option<ChannelField>,
    pub y: Option<ChannelField>,
}

impl ProvegaSpec {
    pub fn chunking(&self) -> &ChunkingConfig {
        &self.progression.chunking
    }

    pub fn control(&self) -> &ControlConfig {
        &self.progression.control
    }

    pub fn monitoring(&self) -> &MonitoringConfig {
        &self.progression.monitoring
    }

    /// Whether the host view reads from a WebSocket generator.
    pub fn is_progressive_input(&self) -> bool {
        host_url(&self.base_view).is_some_and(is_ws_url)
    }

    /// The x/y encodings of the host view: top-level `encoding`, else the first
    /// layer that has one.
    pub fn encodings(&self) -> Encodings {
        let from = |enc: &Json| Encodings {
            x: channel(enc, "x"),
            y: channel(enc, "y"),
        };
        if let Some(enc) = self.base_view.get("encoding") {
            return from(enc);
        }
        self.base_view
            .get("layer")
            .and_then(Json::as_array)
            .and_then(|layers| layers.iter().find_map(|l| l.get("encoding")))
            .map(from)
            .unwrap_or_default()
    }

    /// The full document: `base_view` with the normalized `provega` block at its
    /// original position.
    pub fn to_document(&self) -> Json {
        write::to_document(self)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("documents always serialize")
    }

    /// Checks the spec against the source actually used to run it, which may be
    /// overridden on the command line.
    pub fn validate_for_source(&self, source: &DataSourceDescriptor) -> Result<(), SpecError> {
        let chunking = &self.progression.chunking;
        if source.is_progressive() {
            if chunking.reading.is_some() {
                return Err(SpecError::validation(
                    "provega.progression.chunking.reading",
                    "reading is not allowed with a progressive (WebSocket) input",
                ));
            }
            if chunking.kind == ChunkingType::Process {
                return Err(SpecError::validation(
                    "provega.progression.chunking.type",
                    "process chunking requires a complete input",
                ));
            }
        } else if chunking.reading.is_none() {
            return Err(SpecError::validation(
                "provega.progression.chunking.reading",
                "reading is required when the engine chunks a complete input",
            ));
        }
        Ok(())
    }

    /// Returns a copy suited to `source`: complete inputs get a reading block
    /// (defaults) when missing, progressive inputs lose theirs.
    pub fn adapted_to(&self, source: &DataSourceDescriptor) -> ProvegaSpec {
        let mut spec = self.clone();
        let reading = &mut spec.progression.chunking.reading;
        if source.is_progressive() {
            *reading = None;
        } else if reading.is_none() {
            *reading = Some(ReadingConfig::auto());
        }
        spec
    }
}

/// A runnable data-chunking spec for `source`: ascending reading,
/// `chunk_size = max(1, ceil(n / 100))`, 250 ms frequency. When the row count
/// is not known yet the chunk size is left automatic (placeholder 1) and fixed
/// at load.
pub fn default_spec_for(source: &DataSourceDescriptor) -> ProvegaSpec {
    let mut reading = ReadingConfig::auto();
    if let Some(n) = source.known_row_count() {
        reading.resolve_chunk_size(n);
    }
    let mut base = Map::new();
    base.insert(
        "$schema".into(),
        Json::String("https://vega.github.io/schema/vega-lite/v5.json".into()),
    );
    let mut data = Map::new();
    data.insert("name".into(), Json::String("source".into()));
    base.insert("data".into(), Json::Object(data));
    base.insert("mark".into(), Json::String("point".into()));
    let progressive = source.is_progressive();
    ProvegaSpec {
        base_view: Json::Object(base),
        progression: ProgressionConfig {
            chunking: ChunkingConfig {
                kind: ChunkingType::Data,
                reading: (!progressive).then_some(reading),
                processor: None,
            },
            control: ControlConfig::default(),
            monitoring: MonitoringConfig::default(),
        },
        visualization: VisualizationConfig::default(),
        interaction: None,
        guidance: None,
        provega_index: 3,
    }
}

pub(crate) fn host_url(view: &Json) -> Option<&str> {
    view.get("data")?.get("url")?.as_str()
}

pub(crate) fn is_ws_url(url: &str) -> bool {
    url.starts_with("ws://") || url.starts_with("wss://")
}

fn channel(encoding: &Json, name: &str) -> Option<ChannelField> {
    let ch = encoding.get(name)?;
    Some(ChannelField {
        field: ch.get("field")?.as_str()?.to_owned(),
        kind: ch.get("type").and_then(Json::as_str).map(str::to_owned),
    })
}

#[cfg(test)]
mod tests;
