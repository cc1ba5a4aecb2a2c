//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness; a non-flag argument keeps only criteria whose name contains it.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use provega_cli::gallery::{self, BUNDLES};
use provega_cli::generator::{write_records, GeneratorSpec};
use provega_core::data_source::{load_complete, DataSourceDescriptor, Dataset};
use provega_core::processors::{init_centroids, KMeans, KMeansParams, Processor, ProcessorMode};
use provega_core::protocol::{decode, encode, ClientMessage, EngineToGenerator, GeneratorMessage, ServerMessage};
use provega_core::quality::{estimate_etc, QualitySample};
use provega_core::rng::SplitMix64;
use provega_core::scheduler::SessionInput;
use provega_core::sim::{self, GeneratorEvent, SimConfig, VirtualGenerator};
use provega_core::spec::{ReadingConfig, ReadingMethod};
use provega_core::store::Rect;
use provega_core::trace::{read_trace, TraceLine};
use provega_core::{
    parse_spec, plan_chunks, Changeset, ChangesetStore, Output, ProvegaSpec, Row, RowId, Session, Status, Value,
};
use provega_server::{GeneratorLink, RunnerConfig, SessionHandle};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value as Json};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const CRITERIA: &[(&str, fn() -> Check)] = &[
    ("cadence", cadence),
    ("chunk_plans", chunk_plans),
    ("history_inversion", history_inversion),
    ("change_detection", change_detection),
    ("quality_invariants", quality_invariants),
    ("kmeans", kmeans),
    ("ack_flow", ack_flow),
    ("determinism", determinism),
    ("protocol_goldens", protocol_goldens),
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (name, _) in CRITERIA {
            println!("{name}: test");
        }
        return;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn provega() -> Command {
    Command::new(env!("CARGO_BIN_EXE_provega"))
}

fn export(name: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    gallery::find(name).unwrap().export(dir.path()).unwrap();
    dir
}

fn read_lines(path: &Path) -> Vec<TraceLine> {
    read_trace(BufReader::new(fs::File::open(path).unwrap())).unwrap()
}

fn patch_json(path: &Path, f: impl FnOnce(&mut Json)) {
    let mut v: Json = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    f(&mut v);
    fs::write(path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

// ---------------------------------------------------------------- cadence

fn realtime_run(dir: &Path, extra: &[&str]) -> Result<(Vec<TraceLine>, Duration), String> {
    let trace = dir.join("rt.jsonl");
    let start = Instant::now();
    let out = provega()
        .args(["run", "--realtime", "--spec"])
        .arg(dir.join("spec.json"))
        .arg("--trace")
        .arg(&trace)
        .args(extra)
        .output()
        .map_err(|e| e.to_string())?;
    let wall = start.elapsed();
    ensure!(
        out.status.success(),
        "run exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr).trim()
    );
    Ok((read_lines(&trace), wall))
}

fn judge_cadence(label: &str, target_ms: f64, lines: &[TraceLine], wall: Duration) -> Check {
    ensure!(lines.len() >= 40, "{label}: only {} emissions", lines.len());
    let span = (lines[lines.len() - 1].t_ms - lines[0].t_ms) as f64;
    let mean = span / (lines.len() - 1) as f64;
    let detail = format!(
        "{label} mean {mean:.1} ms over {} emissions in {:.1} s",
        lines.len(),
        wall.as_secs_f64()
    );
    ensure!((mean - target_ms).abs() <= 0.2 * target_ms, "{detail}: outside ±20% of {target_ms}");
    ensure!(wall <= Duration::from_secs(60), "{detail}: over 60 s");
    Ok(detail)
}

fn cadence_data() -> Check {
    let dir = export("density_data_chunking");
    write_records(&dir.path().join("data.csv"), &provega_core::synth::scatter(100_000, 1))
        .map_err(|e| e.to_string())?;
    patch_json(&dir.path().join("spec.json"), |v| {
        v["provega"]["progression"]["chunking"]["reading"]["chunk_size"] = json!(2000);
    });
    let (lines, wall) = realtime_run(dir.path(), &[])?;
    ensure!(lines.last().map(|l| l.rows_emitted) == Some(100_000), "not all rows emitted");
    judge_cadence("data 250", 250.0, &lines, wall)
}

fn cadence_bundle(name: &str, target: f64) -> Check {
    let dir = export(name);
    let (lines, wall) = realtime_run(dir.path(), &[])?;
    judge_cadence(&format!("{name} {target}"), target, &lines, wall)
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

struct Reaper(std::process::Child);

impl Drop for Reaper {
    fn drop(&mut self) {
        self.0.kill().ok();
        self.0.wait().ok();
    }
}

/// A fake generator process listening on a socket and the engine dialing it.
fn cadence_backend() -> Check {
    let dir = export("backend_demo");
    let port = free_port();
    patch_json(&dir.path().join("spec.json"), |v| {
        v["data"]["url"] = json!(format!("ws://127.0.0.1:{port}"));
    });
    let mut child = provega()
        .args(["fake-generator", "--config"])
        .arg(dir.path().join("generator.json"))
        .args(["--listen", &format!("127.0.0.1:{port}")])
        .env("RUST_LOG", "info")
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let stderr = child.stderr.take().unwrap();
    let _reaper = Reaper(child);
    let (ready_tx, ready_rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(stderr).lines().map_while(Result::ok) {
            if line.contains("listening") {
                ready_tx.send(()).ok();
            }
        }
    });
    ready_rx
        .recv_timeout(Duration::from_secs(20))
        .map_err(|_| "fake generator did not start".to_owned())?;
    let (lines, wall) = realtime_run(dir.path(), &[])?;
    ensure!(lines.last().map(|l| l.rows_emitted) == Some(2000), "not all rows emitted");
    judge_cadence("backend 330", 330.0, &lines, wall)
}

fn cadence() -> Check {
    let results = [
        cadence_data(),
        cadence_bundle("kmeans_process", 125.0),
        cadence_bundle("kmeans_mixed", 500.0),
        cadence_backend(),
    ];
    let failed = results.iter().any(Result::is_err);
    let text: Vec<String> = results.into_iter().map(|r| r.unwrap_or_else(|e| e)).collect();
    let text = text.join("; ");
    if failed {
        Err(text)
    } else {
        Ok(text)
    }
}

// ------------------------------------------------------------ chunk plans

fn reading(method: ReadingMethod, chunk_size: usize, seed: u64) -> ReadingConfig {
    ReadingConfig {
        method,
        chunk_size,
        auto_chunk_size: false,
        frequency_ms: 250,
        seed,
    }
}

fn plan_cli(n: usize, size: usize, seed: u64) -> Result<Vec<u8>, String> {
    let out = provega()
        .args(["plan", "--method", "random"])
        .args(["--rows", &n.to_string(), "--chunk-size", &size.to_string(), "--seed", &seed.to_string()])
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "plan exited {:?}", out.status.code());
    Ok(out.stdout)
}

fn chunks_text(chunks: &[Vec<usize>]) -> Vec<u8> {
    let mut s = String::new();
    for c in chunks {
        s.push_str(&serde_json::to_string(c).unwrap());
        s.push('\n');
    }
    s.into_bytes()
}

fn chunk_plans() -> Check {
    let mut plans = 0;
    for method in [ReadingMethod::Ascending, ReadingMethod::Descending, ReadingMethod::Random] {
        for seed in 0..100u64 {
            let mut rng = SplitMix64::new(seed ^ 0xA5A5);
            let n = if seed == 0 { 10_000 } else { rng.below(10_000) as usize + 1 };
            let size = rng.below(n as u64) as usize + 1;
            let plan = plan_chunks(n, &reading(method, size, seed)).map_err(|e| e.to_string())?;
            let mut all: Vec<usize> = plan.order().collect();
            ensure!(all.len() == n, "{method:?} n={n} seed={seed}: {} indices", all.len());
            for (i, c) in plan.chunks.iter().enumerate() {
                let last = i + 1 == plan.chunks.len();
                ensure!(
                    c.len() == size || (last && !c.is_empty() && c.len() < size),
                    "{method:?} n={n}: chunk {i} has {} rows",
                    c.len()
                );
            }
            all.sort_unstable();
            ensure!(all.iter().copied().eq(0..n), "{method:?} n={n} seed={seed}: not a permutation");
            plans += 1;
        }
    }

    // Two processes, same seed, same bytes; and the same as in-process.
    let mut cross = 0;
    for seed in 0..100u64 {
        let n = 1 + (seed as usize * 97) % 10_000;
        let size = 1 + (seed as usize * 13) % 257;
        let a = plan_cli(n, size, seed)?;
        let b = plan_cli(n, size, seed)?;
        ensure!(a == b, "seed {seed}: processes disagree");
        let here = plan_chunks(n, &reading(ReadingMethod::Random, size, seed)).unwrap();
        ensure!(a == chunks_text(&here.chunks), "seed {seed}: process and library disagree");
        cross += 1;
    }

    let golden: Json = serde_json::from_str(
        &fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/prng_golden.json"))
            .unwrap(),
    )
    .unwrap();
    let mut goldens = 0;
    for case in golden["plans"].as_array().unwrap() {
        let n = case["rows"].as_u64().unwrap() as usize;
        let size = case["chunk_size"].as_u64().unwrap() as usize;
        let seed = case["seed"].as_u64().unwrap();
        let expected: Vec<Vec<usize>> = serde_json::from_value(case["chunks"].clone()).unwrap();
        ensure!(plan_cli(n, size, seed)? == chunks_text(&expected), "golden plan n={n} seed={seed}");
        goldens += 1;
    }
    Ok(format!(
        "{plans} plans are permutations; {cross} random plans identical across processes; {goldens} golden plans"
    ))
}

// ------------------------------------------------------- history inversion

fn random_row(id: u64, rng: &mut SplitMix64) -> Row {
    let mut values = provega_core::value::Record::new();
    values.insert("x".into(), Value::Float(rng.next_f64() * 100.0));
    values.insert("n".into(), Value::Int(rng.below(1000) as i64));
    values.insert("s".into(), Value::Str(format!("v{}", rng.below(10))));
    Row::new(id, values)
}

fn random_changeset(rng: &mut SplitMix64, live: &BTreeMap<RowId, Row>, next_id: &mut u64) -> Changeset {
    let mut cs = Changeset::forward(0);
    let mut pool: Vec<RowId> = live.keys().copied().collect();
    rng.shuffle(&mut pool);
    let updates = rng.below(pool.len().min(6) as u64 + 1) as usize;
    let removes = rng.below((pool.len() - updates).min(4) as u64 + 1) as usize;
    for id in &pool[..updates] {
        cs.updates.push(random_row(id.0, rng));
    }
    cs.removes.extend_from_slice(&pool[updates..updates + removes]);
    for _ in 0..rng.below(6) {
        cs.inserts.push(random_row(*next_id, rng));
        *next_id += 1;
    }
    cs
}

fn replay(changesets: &[Changeset]) -> BTreeMap<RowId, Row> {
    let mut rows = BTreeMap::new();
    for cs in changesets {
        for r in cs.inserts.iter().chain(&cs.updates) {
            rows.insert(r.id, r.clone());
        }
        for id in &cs.removes {
            rows.remove(id);
        }
    }
    rows
}

fn history_inversion() -> Check {
    const SCRIPTS: u64 = 1000;
    const DEPTH: usize = 256;
    let mut ops = 0usize;
    let mut deepest = 0usize;
    for seed in 0..SCRIPTS {
        let mut rng = SplitMix64::new(seed);
        let mut store = ChangesetStore::new(Default::default(), Default::default());
        let mut applied: Vec<Changeset> = Vec::new();
        let mut undone: Vec<Changeset> = Vec::new();
        let mut next_id = 0u64;
        let len = 1 + rng.below(600);
        for _ in 0..len {
            let r = rng.below(10);
            if (r < 6 || applied.is_empty()) && applied.len() < DEPTH {
                let cs = random_changeset(&mut rng, store.rows(), &mut next_id);
                store.apply(cs.clone()).map_err(|e| format!("script {seed}: {e}"))?;
                applied.push(cs);
                undone.clear();
            } else if r < 9 || undone.is_empty() {
                store.invert_last().map_err(|e| format!("script {seed}: {e}"))?;
                undone.push(applied.pop().unwrap());
            } else {
                ensure!(store.redo().is_some(), "script {seed}: redo refused");
                applied.push(undone.pop().unwrap());
            }
            deepest = deepest.max(applied.len());
            ops += 1;
        }
        ensure!(store.step() == applied.len() as i64 - 1, "script {seed}: step {}", store.step());
        ensure!(*store.rows() == replay(&applied), "script {seed}: state differs from replay");
    }
    Ok(format!("{SCRIPTS} scripts, {ops} operations, deepest history {deepest}"))
}

// ------------------------------------------------- gallery runs in-process

struct BundleRun {
    _dir: tempfile::TempDir,
    spec: ProvegaSpec,
    session: Session,
    generator: Option<VirtualGenerator>,
}

fn bundle_run(name: &str) -> BundleRun {
    let dir = export(name);
    let spec = parse_spec(&fs::read_to_string(dir.path().join("spec.json")).unwrap()).unwrap();
    let source = DataSourceDescriptor::from_spec(&spec, dir.path()).unwrap();
    let spec = spec.adapted_to(&source);
    let (input, generator) = if source.is_progressive() {
        let g = GeneratorSpec::load(&dir.path().join("generator.json")).unwrap();
        let window = g.effective_window(spec.control().ack_flow_control);
        let vg = VirtualGenerator::new(g.records(), g.chunk_size, g.chunk_delay_ms, window);
        (SessionInput::Progressive, Some(vg))
    } else {
        (SessionInput::Complete(load_complete(&source).unwrap()), None)
    };
    let session = Session::new(spec.clone(), input).unwrap();
    BundleRun {
        _dir: dir,
        spec,
        session,
        generator,
    }
}

fn position(row: &Row, fx: &str, fy: &str) -> Option<(f64, f64)> {
    Some((row.values.get(fx)?.as_f64()?, row.values.get(fy)?.as_f64()?))
}

fn change_detection() -> Check {
    let mut summary = Vec::new();
    for bundle in BUNDLES {
        let mut run = bundle_run(bundle.name);
        let enc = run.spec.encodings();
        let fx = enc.x.map(|c| c.field).unwrap_or_default();
        let fy = enc.y.map(|c| c.field).unwrap_or_default();
        let area_on = run.spec.progression.monitoring.change.area.enabled;
        let mut state: BTreeMap<RowId, Row> = BTreeMap::new();
        let mut steps = 0usize;
        let mut areas = 0usize;
        let mut mismatch: Option<String> = None;
        let report = sim::run(&mut run.session, run.generator.as_mut(), SimConfig::default(), |_, o| {
            let Output::Changeset(e) = o else { return };
            let before = state.clone();
            for r in e.changeset.inserts.iter().chain(&e.changeset.updates) {
                state.insert(r.id, r.clone());
            }
            for id in &e.changeset.removes {
                state.remove(id);
            }
            let ids: BTreeSet<RowId> = before.keys().chain(state.keys()).copied().collect();
            let changed: Vec<RowId> = ids.into_iter().filter(|id| before.get(id) != state.get(id)).collect();
            let mut rect: Option<Rect> = None;
            if area_on {
                for id in &changed {
                    for row in [before.get(id), state.get(id)].into_iter().flatten() {
                        if let Some((x, y)) = position(row, &fx, &fy) {
                            let r = rect.get_or_insert(Rect { x0: x, x1: x, y0: y, y1: y });
                            r.x0 = r.x0.min(x);
                            r.x1 = r.x1.max(x);
                            r.y0 = r.y0.min(y);
                            r.y1 = r.y1.max(y);
                        }
                    }
                }
            }
            if mismatch.is_none() {
                if e.report.changed_ids != changed {
                    mismatch = Some(format!(
                        "step {}: {} changed ids reported, {} by diff",
                        e.changeset.step,
                        e.report.changed_ids.len(),
                        changed.len()
                    ));
                } else if e.report.changed_area != rect {
                    mismatch = Some(format!(
                        "step {}: area {:?}, diff gives {:?}",
                        e.changeset.step, e.report.changed_area, rect
                    ));
                }
            }
            areas += rect.is_some() as usize;
            steps += 1;
        })
        .map_err(|e| format!("{}: {e}", bundle.name))?;
        ensure!(report.status == Status::Done, "{}: ended {:?}", bundle.name, report.status);
        if let Some(m) = mismatch {
            return Err(format!("{}: {m}", bundle.name));
        }
        summary.push(format!("{} {steps} steps/{areas} areas", bundle.name));
    }
    Ok(summary.join(", "))
}

fn in_unit(v: Option<f64>) -> bool {
    v.is_none_or(|v| (0.0..=1.0).contains(&v))
}

fn quality_invariants() -> Check {
    ensure!(estimate_etc(1000.0, Some(0.5)) == Some(1000.0), "etc(1000 ms, 0.5) = {:?}", estimate_etc(1000.0, Some(0.5)));
    ensure!(estimate_etc(1234.0, Some(1.0)) == Some(0.0), "etc at p=1");
    ensure!(estimate_etc(1234.0, Some(0.0)).is_none() && estimate_etc(1234.0, None).is_none(), "etc without progress");
    let mut samples = 0;
    for bundle in BUNDLES {
        let mut run = bundle_run(bundle.name);
        let mut series: Vec<QualitySample> = Vec::new();
        sim::run(&mut run.session, run.generator.as_mut(), SimConfig::default(), |_, o| {
            if let Output::Changeset(e) = o {
                series.push(e.quality.clone());
            }
        })
        .map_err(|e| format!("{}: {e}", bundle.name))?;
        let name = bundle.name;
        ensure!(run.session.status() == Status::Done, "{name}: not done");
        let mut prev = None;
        for q in &series {
            for (metric, v) in [
                ("absolute_progress", q.absolute_progress),
                ("relative_progress", q.relative_progress),
                ("stability", q.stability),
                ("certainty", q.certainty),
            ] {
                ensure!(in_unit(v), "{name} step {}: {metric} = {v:?}", q.step);
            }
            ensure!(q.etc_ms.is_none_or(|e| e >= 0.0), "{name} step {}: etc {:?}", q.step, q.etc_ms);
            if let (Some(a), Some(b)) = (prev, q.absolute_progress) {
                ensure!(b >= a, "{name} step {}: progress fell from {a} to {b}", q.step);
            }
            if let (Some(p), Some(etc)) = (q.absolute_progress, q.etc_ms) {
                if p > 0.0 && p < 1.0 {
                    let want = q.t_ms as f64 * (1.0 - p) / p;
                    ensure!((etc - want).abs() <= 1e-9 * want.max(1.0), "{name} step {}: etc {etc}, formula {want}", q.step);
                }
            }
            prev = q.absolute_progress.or(prev);
            samples += 1;
        }
        let last = series.last().ok_or(format!("{name}: no emissions"))?;
        ensure!(last.etc_ms == Some(0.0), "{name}: etc at done {:?}", last.etc_ms);
        if series.iter().any(|q| q.absolute_progress.is_some()) {
            ensure!(last.absolute_progress == Some(1.0), "{name}: progress at done {:?}", last.absolute_progress);
        }
    }
    Ok(format!("{samples} samples across {} bundles; etc(1000 ms, 0.5) = 1000 ms", BUNDLES.len()))
}

// ------------------------------------------------------------------ k-means

fn load_bundle_data(name: &str) -> Dataset {
    let dir = export(name);
    load_complete(&DataSourceDescriptor::file(dir.path().join("data.csv"))).unwrap()
}

fn xy(rows: &[Row]) -> Vec<[f64; 2]> {
    rows.iter()
        .map(|r| [r.values["x"].as_f64().unwrap(), r.values["y"].as_f64().unwrap()])
        .collect()
}

fn d2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Plain batch Lloyd: nearest centroid (lowest index on ties), means, and an
/// empty cluster takes the point farthest from its centroid.
fn oracle_lloyd(points: &[[f64; 2]], mut centroids: Vec<[f64; 2]>, iterations: usize) -> (Vec<[f64; 2]>, Vec<usize>) {
    let k = centroids.len();
    let mut labels = vec![0; points.len()];
    for _ in 0..iterations {
        let mut dist = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            for j in 1..k {
                if d2(*p, centroids[j]) < d2(*p, centroids[best]) {
                    best = j;
                }
            }
            labels[i] = best;
            dist[i] = d2(*p, centroids[best]);
        }
        let mut next = centroids.clone();
        let mut taken = Vec::new();
        for (j, c) in next.iter_mut().enumerate() {
            let members: Vec<&[f64; 2]> = points.iter().zip(&labels).filter(|(_, l)| **l == j).map(|(p, _)| p).collect();
            if members.is_empty() {
                let far = (0..points.len())
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .unwrap();
                taken.push(far);
                *c = points[far];
            } else {
                let n = members.len() as f64;
                *c = [members.iter().map(|p| p[0]).sum::<f64>() / n, members.iter().map(|p| p[1]).sum::<f64>() / n];
            }
        }
        centroids = next;
    }
    (centroids, labels)
}

fn objective(points: &[[f64; 2]], labels: &[usize], centroids: &[[f64; 2]]) -> f64 {
    points.iter().zip(labels).map(|(p, &l)| d2(*p, centroids[l])).sum()
}

fn cluster_means(points: &[[f64; 2]], labels: &[usize], k: usize) -> Vec<[f64; 2]> {
    let mut sums = vec![[0.0; 2]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        sums[l][0] += p[0];
        sums[l][1] += p[1];
        counts[l] += 1;
    }
    sums.iter().zip(&counts).map(|(s, &c)| [s[0] / c.max(1) as f64, s[1] / c.max(1) as f64]).collect()
}

fn final_labels(session: &Session, n: usize) -> Result<Vec<usize>, String> {
    let rows = session.store().rows();
    let mut labels = vec![usize::MAX; n];
    for (id, row) in rows {
        let i = id.0 as usize;
        ensure!(i < n, "unexpected row id {id}");
        labels[i] = row.values.get("cluster").and_then(Value::as_f64).ok_or(format!("row {id} has no cluster"))? as usize;
    }
    ensure!(labels.iter().all(|&l| l != usize::MAX), "rows missing from the final state");
    Ok(labels)
}

fn kmeans() -> Check {
    let k = 5;
    let seed = 7;
    let params = |max_iterations| KMeansParams {
        k,
        x: "x".into(),
        y: "y".into(),
        seed,
        max_iterations,
    };

    // Process chunking: monotone objective and agreement with the oracle.
    let data = load_bundle_data("kmeans_process");
    let points = xy(&data.rows);
    let mut km = KMeans::new(params(10_000), ProcessorMode::Process);
    km.ingest(&data.rows).map_err(|e| e.to_string())?;
    let mut last = f64::INFINITY;
    while !km.converged() && km.iterations() < 10_000 {
        km.iterate().map_err(|e| e.to_string())?;
        let labels: Vec<usize> = km.assignment().iter().map(|a| a.unwrap()).collect();
        let j = objective(&points, &labels, km.centroids());
        ensure!(j <= last, "objective rose at iteration {}: {last} -> {j}", km.iterations());
        last = j;
    }
    ensure!(km.converged(), "no convergence");
    let iterations = km.iterations();
    let init = init_centroids(&points, k, seed).map_err(|e| e.to_string())?;
    let (oracle, _) = oracle_lloyd(&points, init.clone(), iterations);
    let gap = km
        .centroids()
        .iter()
        .zip(&oracle)
        .flat_map(|(a, b)| [(a[0] - b[0]).abs(), (a[1] - b[1]).abs()])
        .fold(0.0, f64::max);
    ensure!(gap <= 1e-9, "centroids differ from the oracle by {gap:e}");

    // The session's labels after its capped run equal the oracle's.
    let mut run = bundle_run("kmeans_process");
    sim::run(&mut run.session, None, SimConfig::default(), |_, _| {}).map_err(|e| e.to_string())?;
    let capped = run.session.processor().unwrap().iterations();
    let (_, oracle_labels) = oracle_lloyd(&points, init, capped);
    ensure!(final_labels(&run.session, points.len())? == oracle_labels, "session labels differ from the oracle after {capped} iterations");

    // Mixed chunking converges to the full-data result.
    let data = load_bundle_data("kmeans_mixed");
    let points = xy(&data.rows);
    let mut run = bundle_run("kmeans_mixed");
    sim::run(&mut run.session, None, SimConfig::default(), |_, _| {}).map_err(|e| e.to_string())?;
    ensure!(run.session.status() == Status::Done, "mixed run ended {:?}", run.session.status());
    ensure!(run.session.processor().unwrap().converged(), "mixed run did not converge");
    let labels = final_labels(&run.session, points.len())?;
    let j_mixed = objective(&points, &labels, &cluster_means(&points, &labels, k));
    let mut full = KMeans::new(params(10_000), ProcessorMode::Process);
    full.ingest(&data.rows).map_err(|e| e.to_string())?;
    while !full.converged() {
        full.iterate().map_err(|e| e.to_string())?;
    }
    let full_labels: Vec<usize> = full.assignment().iter().map(|a| a.unwrap()).collect();
    let j_full = objective(&points, &full_labels, &cluster_means(&points, &full_labels, k));
    let rel = (j_mixed - j_full).abs() / j_full;
    ensure!(rel <= 1e-6, "mixed objective {j_mixed} vs full {j_full} (relative {rel:e})");

    Ok(format!(
        "process: {iterations} iterations monotone, centroid gap {gap:e}, session labels match after {capped}; mixed vs full relative objective {rel:e}"
    ))
}

// ----------------------------------------------------------------- ack flow

const ACK_BATCHES: u64 = 10_000;

fn ack_spec() -> ProvegaSpec {
    let dir = export("backend_demo");
    parse_spec(&fs::read_to_string(dir.path().join("spec.json")).unwrap()).unwrap()
}

/// Virtual time: the generator waits for acks, the log shows every instant.
fn ack_flow_virtual() -> Check {
    let spec = ack_spec();
    ensure!(spec.control().ack_flow_control && spec.control().ack_window == 1, "spec must ack with window 1");
    let rows = provega_core::synth::taxi_trips(ACK_BATCHES as usize, 3);
    let mut generator = VirtualGenerator::new(rows, 1, 1, Some(1));
    let mut session = Session::new(spec, SessionInput::Progressive).map_err(|e| e.to_string())?;
    let mut seq = 0u64;
    let mut committed: BTreeMap<u64, u64> = BTreeMap::new();
    let mut early = 0;
    let mut acks = 0;
    let report = sim::run(&mut session, Some(&mut generator), SimConfig::default(), |_, o| {
        seq += 1;
        match o {
            Output::Changeset(e) => {
                for b in &e.batches {
                    committed.insert(*b, seq);
                }
            }
            Output::Ack(b) => {
                acks += 1;
                if committed.get(b).is_none_or(|&at| at >= seq) {
                    early += 1;
                }
            }
            Output::Status(_) => {}
        }
    })
    .map_err(|e| e.to_string())?;
    ensure!(report.status == Status::Done, "ended {:?}", report.status);
    ensure!(committed.len() as u64 == ACK_BATCHES, "{} batches committed", committed.len());
    ensure!(acks == ACK_BATCHES, "{acks} acks");
    ensure!(early == 0, "{early} acks before their batch was in the trace");
    let mut in_flight = 0i64;
    let mut peak = 0;
    let mut last_t = 0;
    for ev in generator.log() {
        let t = match *ev {
            GeneratorEvent::Sent { t_ms, .. } => {
                in_flight += 1;
                t_ms
            }
            GeneratorEvent::Acked { t_ms, .. } => {
                in_flight -= 1;
                t_ms
            }
            GeneratorEvent::End { t_ms } => t_ms,
        };
        ensure!(t >= last_t, "log out of order");
        last_t = t;
        peak = peak.max(in_flight);
    }
    ensure!(peak <= 1 && report.max_in_flight <= 1, "in flight reached {peak}/{}", report.max_in_flight);
    Ok(format!("virtual: {ACK_BATCHES} batches, peak in flight {peak}"))
}

/// Wall clock: an instrumented generator on the live runner checks the tap
/// (the trace) for batch b at the moment ack{b} arrives.
fn ack_flow_live() -> Check {
    let spec = ack_spec();
    let rows = provega_core::synth::taxi_trips(ACK_BATCHES as usize, 4);
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async move {
        let session = Session::new(spec, SessionInput::Progressive).map_err(|e| e.to_string())?;
        let (handle, task) = SessionHandle::spawn(
            session,
            RunnerConfig {
                autostart: true,
                max_buffer_rows: None,
            },
        );
        let mut tap = handle.tap().await.ok_or("runner gone")?;
        let GeneratorLink { gate, mut acks, feed } = handle.attach_generator().await?;
        let mut in_trace: HashSet<u64> = HashSet::new();
        let mut peak_in_flight = 0usize;
        let mut peak_permits = 0usize;
        let mut early = 0;
        let drain = |tap: &mut tokio::sync::mpsc::UnboundedReceiver<(u64, Output)>, set: &mut HashSet<u64>| {
            while let Ok((_, o)) = tap.try_recv() {
                if let Output::Changeset(e) = o {
                    set.extend(e.batches);
                }
            }
        };
        for (b, row) in rows.into_iter().enumerate() {
            let b = b as u64;
            peak_permits = peak_permits.max(gate.available_permits());
            let permit = tokio::time::timeout(Duration::from_secs(10), gate.acquire())
                .await
                .map_err(|_| format!("no read permit for batch {b}"))?
                .map_err(|e| e.to_string())?;
            permit.forget();
            feed.frame(encode(&GeneratorMessage::Chunk { batch: b, rows: vec![row] }));
            // The runner queues ack{b} before handing the permit back, so a
            // visible permit with no queued ack would admit a second batch.
            let permits = gate.available_permits();
            let queued = acks.try_recv().ok();
            if queued.is_none() {
                peak_in_flight = peak_in_flight.max(1 + permits);
            }
            let acked = match queued {
                Some(a) => a,
                None => tokio::time::timeout(Duration::from_secs(10), acks.recv())
                    .await
                    .map_err(|_| format!("no ack for batch {b}"))?
                    .ok_or("ack channel closed")?,
            };
            ensure!(acked == b, "ack {acked} while {b} was in flight");
            drain(&mut tap, &mut in_trace);
            if !in_trace.contains(&acked) {
                early += 1;
            }
        }
        feed.frame(encode(&GeneratorMessage::End {}));
        let done = tokio::time::timeout(Duration::from_secs(10), async {
            while let Some((_, o)) = tap.recv().await {
                if let Output::Status(s) = o {
                    if s.status == Status::Done {
                        return true;
                    }
                }
            }
            false
        })
        .await
        .unwrap_or(false);
        handle.shutdown();
        task.await.map_err(|e| e.to_string())?;
        ensure!(done, "session did not finish");
        ensure!(early == 0, "{early} acks arrived before their batch was in the trace");
        ensure!(peak_in_flight <= 1 && peak_permits <= 1, "engine allowed {peak_in_flight} in flight ({peak_permits} permits)");
        Ok(format!("live: {ACK_BATCHES} batches, peak in flight {peak_in_flight}"))
    })
}

fn ack_flow() -> Check {
    Ok(format!("{}; {}", ack_flow_virtual()?, ack_flow_live()?))
}

// -------------------------------------------------------------- determinism

fn determinism() -> Check {
    let mut summary = Vec::new();
    for bundle in BUNDLES {
        let dir = export(bundle.name);
        let mut first: Option<Vec<u8>> = None;
        for i in 0..5 {
            let trace = dir.path().join(format!("trace{i}.jsonl"));
            let mut cmd = provega();
            cmd.args(["run", "--spec"]).arg(dir.path().join("spec.json")).arg("--trace").arg(&trace);
            if bundle.has_generator() {
                cmd.arg("--generator").arg(dir.path().join("generator.json"));
            }
            let out = cmd.output().map_err(|e| e.to_string())?;
            ensure!(out.status.success(), "{} run {i} exited {:?}", bundle.name, out.status.code());
            let bytes = fs::read(&trace).unwrap();
            match &first {
                None => first = Some(bytes),
                Some(f) => ensure!(*f == bytes, "{} run {i} differs from run 0", bundle.name),
            }
        }
        summary.push(format!("{} ({} bytes)", bundle.name, first.unwrap().len()));
    }
    Ok(format!("5 identical traces each: {}", summary.join(", ")))
}

// ---------------------------------------------------------- protocol files

fn reencode<T: Serialize + DeserializeOwned>(text: &str) -> Result<String, String> {
    let msg: T = decode(text).map_err(|e| format!("{e}: {text}"))?;
    Ok(encode(&msg))
}

fn protocol_goldens() -> Check {
    let dir: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/protocol");
    let mut types = BTreeSet::new();
    let mut files = 0;
    for entry in fs::read_dir(&dir).map_err(|e| e.to_string())? {
        let path = entry.unwrap().path();
        let name = path.file_stem().unwrap().to_string_lossy().into_owned();
        let text = fs::read_to_string(&path).unwrap();
        let text = text.trim_end_matches('\n');
        let again = match name.split('_').next().unwrap() {
            "server" => reencode::<ServerMessage>(text)?,
            "client" => reencode::<ClientMessage>(text)?,
            "generator" => reencode::<GeneratorMessage>(text)?,
            "ack" => reencode::<EngineToGenerator>(text)?,
            other => return Err(format!("unexpected fixture {other}")),
        };
        ensure!(again == text, "{name} does not round-trip");
        let v: Json = serde_json::from_str(text).unwrap();
        types.insert(v["type"].as_str().unwrap_or_default().to_owned());
        files += 1;
    }
    let want: BTreeSet<String> = [
        "ack", "changeset", "chunk", "control", "end", "error", "hello", "set", "snapshot_request", "status",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    ensure!(types == want, "message types covered: {types:?}");
    Ok(format!("{files} fixtures, {} message types, bit-exact", types.len()))
}
