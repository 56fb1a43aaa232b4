//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use edgepark::agent::csv::{parse_csv, render_csv};
use edgepark::agent::{csv_file_name, write_csv};
use edgepark::harness::report::lot_report;
use edgepark::harness::{run_sim, verify, RunOutcome, ScenarioConfig, Simulation};
use edgepark::hub::HubStore;
use edgepark::{
    occupation_rate, oracle_occupancy, BayId, BayStatus, EpochMs, OccupancyEvent, RollupRecord, RollupWindow,
    StateTable, DAY_MS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

const TRACES: u64 = 1_000;
const MAX_BAYS: u32 = 50;
const MAX_EVENTS: usize = 10_000;

struct RandomTrace {
    events: Vec<OccupancyEvent>,
    boundaries: Vec<EpochMs>,
}

fn random_trace(seed: u64) -> RandomTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bays = rng.random_range(1..=MAX_BAYS);
    let n = rng.random_range(0..=MAX_EVENTS);
    let span = rng.random_range(1_000..=3 * DAY_MS);
    let origin = 1_542_499_200_000 + rng.random_range(-DAY_MS..DAY_MS);
    let mut ts: Vec<EpochMs> = (0..n).map(|_| origin + rng.random_range(0..=span)).collect();
    ts.sort_unstable();
    let events: Vec<OccupancyEvent> = ts
        .into_iter()
        .map(|t| {
            let bay = rng.random_range(1..=bays);
            let status = match rng.random_range(0..10) {
                0 => BayStatus::Unknown,
                1..=5 => BayStatus::Occupied,
                _ => BayStatus::Free,
            };
            if rng.random_bool(0.1) {
                OccupancyEvent::snapshot(t, "lot", bay, status)
            } else {
                OccupancyEvent::update(t, "lot", bay, status)
            }
        })
        .collect();
    let first = origin - rng.random_range(0..=60_000);
    let mut boundaries: Vec<EpochMs> =
        (0..rng.random_range(1..=20)).map(|_| origin + rng.random_range(1..=span + 60_000)).collect();
    boundaries.push(first);
    // Some boundaries coincide exactly with event timestamps.
    if let Some(e) = events.get(n / 2) {
        boundaries.push(e.ts);
    }
    boundaries.sort_unstable();
    boundaries.dedup();
    boundaries.retain(|&b| b >= first);
    if boundaries.len() < 2 {
        boundaries.push(first + 1);
    }
    RandomTrace { events, boundaries }
}

/// Drives a [`StateTable`] over the trace, rolling up at every boundary, and
/// returns per-window millisecond totals.
type Accounted = Vec<(RollupWindow, BTreeMap<BayId, u64>)>;

fn aggregate(trace: &RandomTrace) -> Result<Accounted, String> {
    let mut table = StateTable::new();
    let mut out = Vec::new();
    let mut next = 0;
    for w in trace.boundaries.windows(2) {
        let window = RollupWindow::new(w[0], w[1]).map_err(|e| e.to_string())?;
        while let Some(e) = trace.events.get(next).filter(|e| e.ts <= window.end) {
            table.apply(e).map_err(|err| format!("apply failed: {err}"))?;
            next += 1;
        }
        let rollup = table.rollup(window).map_err(|e| e.to_string())?;
        for r in &rollup.records {
            let ms = rollup.totals_ms[&r.bay_id];
            if r.occupation_time_sec != ms / 1000 {
                return Err(format!("bay {} record seconds {} from {} ms", r.bay_id, r.occupation_time_sec, ms));
            }
        }
        out.push((window, rollup.totals_ms));
    }
    Ok(out)
}

fn criterion_1_and_2() -> (Outcome, Outcome) {
    let started = Instant::now();
    let mut events = 0usize;
    let mut windows = 0usize;
    let mut first_failure: [Option<String>; 2] = [None, None];
    for seed in 0..TRACES {
        let trace = random_trace(seed);
        events += trace.events.len();
        let aggregated = match aggregate(&trace) {
            Ok(a) => a,
            Err(e) => {
                first_failure[0].get_or_insert(format!("seed {seed}: {e}"));
                continue;
            }
        };
        windows += aggregated.len();
        let mut summed: BTreeMap<BayId, u64> = BTreeMap::new();
        for (window, totals) in &aggregated {
            let oracle = oracle_occupancy(&trace.events, *window).expect("sorted trace");
            if first_failure[0].is_none() && oracle != *totals {
                let bay = oracle
                    .keys()
                    .chain(totals.keys())
                    .find(|b| oracle.get(b) != totals.get(b))
                    .copied()
                    .unwrap_or(BayId(0));
                first_failure[0] = Some(format!(
                    "seed {seed} window {}..{} bay {bay}: oracle {:?} aggregator {:?}",
                    window.start,
                    window.end,
                    oracle.get(&bay),
                    totals.get(&bay)
                ));
            }
            for (bay, ms) in totals {
                *summed.entry(*bay).or_default() += ms;
            }
        }
        let span = RollupWindow::new(trace.boundaries[0], *trace.boundaries.last().unwrap()).unwrap();
        let whole = oracle_occupancy(&trace.events, span).expect("sorted trace");
        if first_failure[1].is_none() && whole != summed {
            first_failure[1] = Some(format!("seed {seed}: window sums {summed:?} vs whole-span oracle {whole:?}"));
        }
    }
    let elapsed = started.elapsed();
    let detail = format!("{TRACES} traces, {events} events, {windows} windows, {:.1} s", elapsed.as_secs_f64());
    let limit = |r: Option<String>| -> Outcome {
        match r {
            Some(f) => Err(f),
            None if elapsed > Duration::from_secs(60) => Err(format!("too slow: {detail}")),
            None => Ok(detail.clone()),
        }
    };
    let [a, b] = first_failure;
    (limit(a), limit(b))
}

fn scenario(text: &str) -> ScenarioConfig {
    ScenarioConfig::parse(text).unwrap_or_else(|e| panic!("bad scenario: {e}\n{text}"))
}

fn run(text: &str, dir: &Path) -> Result<RunOutcome, String> {
    run_sim(scenario(text), dir).map_err(|e| format!("run failed: {e}"))
}

const OVERNIGHT: &str = r#"
name = "overnight"
lot-id = "psu-a"
bays = 22
days = 2
start = "2018-11-20"
[script]
initial = "free"
events = ["72000 12 occupied", "72000 21 occupied", "115200 12 free", "115200 21 free"]
"#;

fn csv_rows(run: &RunOutcome, day: i64) -> Result<(String, Vec<RollupRecord>), String> {
    let start = run.manifest.start_ms + day * DAY_MS;
    let path = run.paths.csv_dir().join(csv_file_name(&run.manifest.lot_id, start));
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let records = parse_csv(&text)?;
    Ok((text, records))
}

fn criterion_3(tmp: &Path) -> Outcome {
    let out = run(OVERNIGHT, &tmp.join("c3"))?;
    let secs = |records: &[RollupRecord], bay: u32| {
        records.iter().find(|r| r.bay_id == BayId(bay)).map(|r| r.occupation_time_sec)
    };
    let (_, day1) = csv_rows(&out, 0)?;
    let (_, day2) = csv_rows(&out, 1)?;
    for bay in [12, 21] {
        ensure!(secs(&day1, bay) == Some(14_400), "day 1 bay {bay}: {:?}", secs(&day1, bay));
        ensure!(secs(&day2, bay) == Some(28_800), "day 2 bay {bay}: {:?}", secs(&day2, bay));
    }
    ensure!(verify(&out.paths.root).map_err(|e| e.to_string())?.passed(), "verify failed");
    Ok("bays 12 and 21: 14400 s on day 1, 28800 s on day 2".into())
}

fn criterion_4(tmp: &Path) -> Outcome {
    let started = Instant::now();
    let out = run("name = \"calibrated\"\nseed = 2018\nbays = 22\nlot-id = \"psu-a\"\ndays = 7", &tmp.join("c4"))?;
    let elapsed = started.elapsed();
    let hub = HubStore::open(out.paths.hub_dir()).map_err(|e| e.to_string())?;
    let report = lot_report(&hub, "psu-a");
    ensure!(report.days.len() == 7, "expected 7 days, got {}", report.days.len());
    let avg = report.days.iter().map(|d| d.fleet_avg_hours).sum::<f64>() / 7.0;
    ensure!((avg - 7.5).abs() <= 0.75, "fleet average {avg:.3} h/day outside 7.5 h +/- 10%");
    ensure!(elapsed < Duration::from_secs(30), "took {:.1} s", elapsed.as_secs_f64());
    Ok(format!("fleet average {avg:.3} h/day over 7 days, {:.2} s", elapsed.as_secs_f64()))
}

fn criterion_5(tmp: &Path) -> Outcome {
    for (i, n) in [1u64, 2, 7, 60, 1_440].into_iter().enumerate() {
        let s = scenario("bays = 4\ndays = 2");
        let start = s.start_ms;
        let mut sim = Simulation::new(s, tmp.join(format!("c5-{i}"))).map_err(|e| e.to_string())?;
        sim.run_until(start + n as i64 * 60_000).map_err(|e| e.to_string())?;
        let seqs = &sim.metrics().ping_seqs;
        ensure!(*seqs == (1..=n).collect::<Vec<_>>(), "after {n} intervals: {} pings {:?}..", seqs.len(), seqs.first());
    }
    Ok("N in {1, 2, 7, 60, 1440}: exactly N pings, seq 1..=N".into())
}

fn criterion_6(tmp: &Path) -> Outcome {
    let base = "bays = 22\nlot-id = \"psu-a\"\ndays = 3\nseed = 6";
    let a = run(&format!("{base}\nmean-occupied-min = 22.5\nmean-free-min = 49.5"), &tmp.join("c6a"))?;
    let b = run(&format!("{base}\nmean-occupied-min = 11.25\nmean-free-min = 24.75"), &tmp.join("c6b"))?;
    let (la, lb) = (&a.ledger, &b.ledger);
    for l in [la, lb] {
        ensure!(l.event_count >= 500 * 3, "only {} update events", l.event_count);
        ensure!(
            l.aggregated_bytes < l.raw_forward_bytes,
            "aggregated {} >= raw {}",
            l.aggregated_bytes,
            l.raw_forward_bytes
        );
    }
    ensure!(
        la.aggregated_bytes == lb.aggregated_bytes,
        "aggregated bytes changed with event count: {} vs {}",
        la.aggregated_bytes,
        lb.aggregated_bytes
    );
    let growth = lb.raw_forward_bytes as f64 / la.raw_forward_bytes as f64;
    ensure!((1.6..=2.4).contains(&growth), "raw bytes grew {growth:.2}x for ~2x events");
    Ok(format!(
        "events {} -> {}, raw {} -> {} B, aggregated {} B both, ratio {:.4} / {:.4}",
        la.event_count,
        lb.event_count,
        la.raw_forward_bytes,
        lb.raw_forward_bytes,
        la.aggregated_bytes,
        la.reduction_ratio.unwrap_or(f64::NAN),
        lb.reduction_ratio.unwrap_or(f64::NAN)
    ))
}

fn dir_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.is_file() {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.insert(name, fs::read(&path).map_err(|e| e.to_string())?);
        }
    }
    Ok(out)
}

fn same_artifacts(a: &RunOutcome, b: &RunOutcome) -> Result<(), String> {
    for (what, x, y) in
        [("CSV", a.paths.csv_dir(), b.paths.csv_dir()), ("hub store", a.paths.hub_dir(), b.paths.hub_dir())]
    {
        let (x, y) = (dir_bytes(&x)?, dir_bytes(&y)?);
        ensure!(!x.is_empty(), "no {what} files");
        ensure!(x == y, "{what} files differ");
    }
    let ledger = |r: &RunOutcome| fs::read(r.paths.ledger()).map_err(|e| e.to_string());
    ensure!(ledger(a)? == ledger(b)?, "ledgers differ");
    Ok(())
}

fn criterion_7(tmp: &Path) -> Outcome {
    let text = "bays = 22\ndays = 3\nseed = 77\ninject = [\"drop:40000:300\", \"duplicate:7\"]\n\
                hub-down = [\"86400:90\"]\nlose-acks = 1\ncrash-at-sec = [150000]";
    let a = run(text, &tmp.join("c7a"))?;
    let b = run(text, &tmp.join("c7b"))?;
    same_artifacts(&a, &b)?;
    Ok(format!("3-day faulted run twice: {} CSVs, hub store and ledger byte-identical", a.manifest.windows().len()))
}

fn criterion_8(tmp: &Path) -> Outcome {
    let base = "bays = 22\ndays = 3\nseed = 808\nlot-id = \"psu-a\"";
    let clean = run(base, &tmp.join("c8-clean"))?;
    let clean_csv = dir_bytes(&clean.paths.csv_dir())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut crash_points = Vec::new();
    for i in 0..5 {
        let at = rng.random_range(1..3 * 86_400);
        crash_points.push(at);
        let crashed = run(&format!("{base}\ncrash-at-sec = [{at}]"), &tmp.join(format!("c8-crash-{i}")))?;
        ensure!(crashed.metrics.crashes == 1, "crash at {at} s did not happen");
        ensure!(dir_bytes(&crashed.paths.csv_dir())? == clean_csv, "CSVs differ after crash at {at} s");
    }

    let d_sec = 120;
    let faulted = run(
        &format!(
            "{base}\ninject = [\"drop:50000:{d_sec}\"]\nbackoff-cap-ms = 1000\n\
             hub-down = [\"86400:45\", \"172800:20\"]\nlose-acks = 2"
        ),
        &tmp.join("c8-drop"),
    )?;
    let report = verify(&faulted.paths.root).map_err(|e| e.to_string())?;
    ensure!(report.passed(), "verify failed: {:?}", report.failures);
    ensure!(
        report.max_error_ms <= d_sec * 1000,
        "max per-bay error {} ms exceeds {} s disconnect",
        report.max_error_ms,
        d_sec
    );
    ensure!(faulted.metrics.upload_attempts > 3, "no upload retries happened");
    let hub = HubStore::open(faulted.paths.hub_dir()).map_err(|e| e.to_string())?;
    let windows = faulted.manifest.windows();
    for w in &windows {
        ensure!(hub.query_daily("psu-a", w.start).is_some(), "window {} missing at hub", w.start);
    }
    let lines = fs::read_to_string(faulted.paths.hub_dir().join("psu-a.jsonl")).map_err(|e| e.to_string())?;
    ensure!(
        lines.lines().count() == windows.len() && hub.len() == windows.len(),
        "{} stored records for {} windows",
        lines.lines().count(),
        windows.len()
    );
    Ok(format!(
        "crashes at {crash_points:?} s match clean CSVs; {d_sec} s disconnect: max error {} ms, {} uploads for {} windows stored once",
        report.max_error_ms,
        faulted.metrics.upload_attempts,
        windows.len()
    ))
}

fn golden(name: &str) -> Result<Vec<u8>, String> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))
}

fn criterion_9(tmp: &Path) -> Outcome {
    let rec = |bay: u32, secs: u64| RollupRecord {
        bay_id: BayId(bay),
        occupation_time_sec: secs,
        occupation_rate: occupation_rate(secs * 1000, DAY_MS as u64).unwrap(),
    };
    let mixed = [rec(1, 27_000), rec(2, 0), rec(12, 14_400), rec(21, 86_400)];
    let dir = tmp.join("c9");
    let path = write_csv(&mixed, 0, "A", &dir).map_err(|e| e.to_string())?;
    ensure!(fs::read(&path).map_err(|e| e.to_string())? == golden("mixed.csv")?, "mixed records differ from golden");
    ensure!(render_csv(&[]).as_bytes() == golden("empty.csv")?, "empty file differs from golden");

    let out = run(OVERNIGHT, &tmp.join("c9-overnight"))?;
    for (day, name) in [(0, "overnight_day1.csv"), (1, "overnight_day2.csv")] {
        let (text, records) = csv_rows(&out, day)?;
        ensure!(text.as_bytes() == golden(name)?, "{name} differs from the run's CSV");
        ensure!(!text.contains('\r'), "CR in {name}");
        ensure!(records.windows(2).all(|w| w[0].bay_id < w[1].bay_id), "unsorted bays in {name}");
    }
    Ok("4 golden files byte-identical (header, integer seconds, 4-decimal rates, LF, sorted)".into())
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let tmp = tmp.path();
    let (c1, c2) = criterion_1_and_2();
    let results: Vec<(&str, Outcome)> = vec![
        ("oracle equivalence", c1),
        ("window partition conservation", c2),
        ("overnight boundary", criterion_3(tmp)),
        ("calibrated week", criterion_4(tmp)),
        ("ping cadence", criterion_5(tmp)),
        ("traffic reduction", criterion_6(tmp)),
        ("end-to-end determinism", criterion_7(tmp)),
        ("crash and disconnect robustness", criterion_8(tmp)),
        ("CSV bit-exactness", criterion_9(tmp)),
    ];
    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
        }
    }
    println!("\nacceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
