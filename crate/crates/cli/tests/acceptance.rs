//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs the real `frames` binary for the pipeline criteria.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use frames_core::analysis::{
    self, confusion_and_accuracy, human_label_probability, join_records, length_bins, BinSpec,
    JoinedPair, LengthGrouping,
};
use frames_core::annotation::{
    record_annotation, Annotation, AnnotationBatch, AnnotationStore, AnnotationSubmission,
    ShownTexts, TextVariant,
};
use frames_core::classifier::{
    classify_corpus, extract_distribution, ClassificationRecord, ClassificationStore,
    ClassifyContext, ClassifyInput, ExtractError, FrameDistribution, ModelParams,
    ScriptedCompletion, ScriptedCompletionProvider, TokenProb,
};
use frames_core::clock::FixedClock;
use frames_core::corpus::TranscriptItem;
use frames_core::framing::{default_frame_definitions, PromptTemplate};
use frames_core::translation::TranslationCache;
use frames_core::{jsonl, Frame, FrameOrder};

const BIN: &str = env!("CARGO_BIN_EXE_frames");
const NOW: &str = "1700000000";

const ACCURACY_TOL: f64 = 1e-12;
const MASS_TOL: f64 = 1e-9;
const ORACLE_TOL: f64 = 1e-12;
const NORMALIZATION_TOL: f64 = 1e-9;
const EXTRACTION_CASES: usize = 2000;
const ARGMAX_CASES: usize = 3000;
const E2E_ITEMS: usize = 100;

type Outcome = Result<String, String>;
/// (item id, scripted alternatives, frame order)
type Case = (String, Vec<TokenProb>, FrameOrder);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- fixtures

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn stamp() -> chrono::DateTime<chrono::Utc> {
    chrono::DateTime::from_timestamp(1_700_000_000, 0).unwrap()
}

/// Expands a `item_id,human,machine` pair fixture into annotation and
/// classification records.
fn load_pairs(name: &str) -> Result<(Vec<Annotation>, Vec<ClassificationRecord>), String> {
    let mut reader = csv::Reader::from_path(fixture(name)).map_err(|e| e.to_string())?;
    let mut anns = Vec::new();
    let mut cls = Vec::new();
    let order = FrameOrder::default();
    for row in reader.records() {
        let row = row.map_err(|e| e.to_string())?;
        let human: Frame = row[1].parse().map_err(|e| format!("{e}"))?;
        let machine: Frame = row[2].parse().map_err(|e| format!("{e}"))?;
        anns.push(Annotation {
            item_id: row[0].to_string(),
            annotator_id: "annotator".into(),
            main_frame: human,
            alternative_frame: None,
            evidence_sentences: vec![],
            comments: None,
            evidence_verified: true,
            shown_variant: TextVariant::Translation,
            shown_word_count: Some(500),
            submitted_at: stamp(),
        });
        let alts = vec![TokenProb::new(machine.label(), 0.0)];
        cls.push(ClassificationRecord {
            item_id: row[0].to_string(),
            model_id: "text-davinci-003".into(),
            temperature: 0.0,
            top_p: 1.0,
            prompt_hash: "sha256:fixture".into(),
            frame_order: order,
            distribution: extract_distribution(&alts, &order).map_err(|e| e.to_string())?,
            raw_alternatives: alts,
            created_at: stamp(),
        });
    }
    Ok((anns, cls))
}

// ---------------------------------------------------------------- criteria

fn published_matrix_accuracy() -> Outcome {
    let order = FrameOrder::default();
    let mut details = Vec::new();
    for (name, expected, diagonal) in [
        ("eenvandaag_pairs.csv", 0.483, [1u64, 303, 162, 1, 16]),
        ("nieuwsuur_pairs.csv", 0.387, [0, 197, 173, 0, 17]),
    ] {
        let (anns, cls) = load_pairs(name)?;
        let join = join_records(&anns, &cls);
        ensure(join.pairs.len() == 1000, || {
            format!("{name}: {} pairs", join.pairs.len())
        })?;
        let report = confusion_and_accuracy(&join.pairs, &order).map_err(|e| e.to_string())?;
        ensure((report.accuracy - expected).abs() <= ACCURACY_TOL, || {
            format!("{name}: accuracy {} != {expected}", report.accuracy)
        })?;
        for (i, f) in order.iter().enumerate() {
            ensure(report.per_frame_agreement[&f] == diagonal[i], || {
                format!("{name}: diagonal {f} = {}", report.per_frame_agreement[&f])
            })?;
        }
        details.push(format!("{expected:.3}"));
    }
    Ok(format!(
        "accuracy {} within {ACCURACY_TOL:e}",
        details.join(" / ")
    ))
}

fn nieuwsuur_rows() -> Outcome {
    let (anns, cls) = load_pairs("nieuwsuur_pairs.csv")?;
    let join = join_records(&anns, &cls);
    let report =
        confusion_and_accuracy(&join.pairs, &FrameOrder::default()).map_err(|e| e.to_string())?;
    let expected = [
        (Frame::Conflict, 256),
        (Frame::Economic, 48),
        (Frame::Morality, 3),
        (Frame::AttributionOfResponsibility, 244),
    ];
    for (frame, total) in expected {
        let got = report.confusion.row_total(frame);
        ensure(got == total, || format!("{frame} row {got} != {total}"))?;
    }
    Ok("rows conflict 256, economic 48, morality 3, responsibility 244".into())
}

/// Independent token normalization and alias lookup.
fn oracle_frame(token: &str) -> Option<Frame> {
    let norm = token
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    if norm.is_empty() {
        return None;
    }
    let aliases: [(Frame, &[&str]); 5] = [
        (
            Frame::AttributionOfResponsibility,
            &[
                "attribution",
                "responsibility",
                "attribution of responsibility",
            ],
        ),
        (Frame::HumanInterest, &["human", "human interest"]),
        (Frame::Conflict, &["conflict"]),
        (Frame::Morality, &["morality", "moral"]),
        (Frame::Economic, &["economic", "economics", "economy"]),
    ];
    let hits: Vec<Frame> = aliases
        .iter()
        .filter(|(_, a)| a.iter().any(|s| s.starts_with(&norm)))
        .map(|(f, _)| *f)
        .collect();
    (hits.len() == 1).then(|| hits[0])
}

fn random_token(rng: &mut ChaCha8Rng) -> String {
    const ALIASES: [&str; 11] = [
        "attribution",
        "responsibility",
        "attribution of responsibility",
        "human",
        "human interest",
        "conflict",
        "morality",
        "moral",
        "economic",
        "economics",
        "economy",
    ];
    const JUNK: [&str; 8] = ["The", "It", "Yes", "none", " ", ".", "x", "News"];
    let core: String = if rng.random_bool(0.75) {
        let alias = ALIASES.choose(rng).unwrap();
        let len = rng.random_range(1..=alias.len());
        alias[..len].to_string()
    } else {
        JUNK.choose(rng).unwrap().to_string()
    };
    let core = match rng.random_range(0..3) {
        0 => core.to_uppercase(),
        1 => {
            let mut c = core.chars();
            c.next()
                .map(|f| f.to_uppercase().chain(c).collect())
                .unwrap_or_default()
        }
        _ => core,
    };
    let lead = [" ", "", "\n", ""].choose(rng).unwrap();
    let trail = ["", "", ".", ":", ","].choose(rng).unwrap();
    format!("{lead}{core}{trail}")
}

fn random_alternatives(rng: &mut ChaCha8Rng) -> Vec<TokenProb> {
    let n = rng.random_range(1..=5);
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let budget = rng.random_range(0.05..0.999);
    let mut alts: Vec<TokenProb> = weights
        .iter()
        .map(|w| TokenProb::new(random_token(rng), (w / total * budget).ln()))
        .collect();
    // Exact ties between two alternatives; copying the smaller keeps total mass <= 1.
    if n >= 2 && rng.random_bool(0.25) {
        let low = alts[0].logprob.min(alts[1].logprob);
        alts[0].logprob = low;
        alts[1].logprob = low;
    }
    alts
}

fn random_order(rng: &mut ChaCha8Rng) -> FrameOrder {
    let mut frames = Frame::ALL;
    frames.shuffle(rng);
    FrameOrder::new(frames).unwrap()
}

fn check_distribution(
    alts: &[TokenProb],
    order: &FrameOrder,
    d: &FrameDistribution,
) -> Result<(), String> {
    let mut expected: BTreeMap<Frame, f64> = Frame::ALL.iter().map(|f| (*f, 0.0)).collect();
    let mut residual = 0.0;
    for a in alts {
        match oracle_frame(&a.token) {
            Some(f) => *expected.get_mut(&f).unwrap() += a.logprob.exp(),
            None => residual += a.logprob.exp(),
        }
    }
    for f in Frame::ALL {
        let m = d.mass_of(f);
        ensure((0.0..=1.0).contains(&m), || {
            format!("mass {m} out of range")
        })?;
        ensure((m - expected[&f]).abs() <= ORACLE_TOL, || {
            format!("{f}: {m} vs oracle {} for {alts:?}", expected[&f])
        })?;
    }
    ensure(
        (d.unmatched_residual - residual).abs() <= ORACLE_TOL,
        || "residual mismatch".into(),
    )?;
    ensure(
        d.frame_total() + d.unmatched_residual <= 1.0 + MASS_TOL,
        || "mass above one".into(),
    )?;
    let max = Frame::ALL
        .iter()
        .map(|f| d.mass_of(*f))
        .fold(f64::MIN, f64::max);
    let first_max = order.iter().find(|f| d.mass_of(*f) == max).unwrap();
    let n_max = Frame::ALL.iter().filter(|f| d.mass_of(**f) == max).count();
    ensure(d.predominant == first_max, || {
        format!("predominant {} != {first_max}", d.predominant)
    })?;
    ensure(d.tie == (n_max > 1), || "tie flag wrong".into())?;
    Ok(())
}

fn extraction_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF4A3E5);
    let mut usable = Vec::new();
    let (mut off_format, mut ties) = (0, 0);
    for case in 0..EXTRACTION_CASES {
        let alts = random_alternatives(&mut rng);
        let order = random_order(&mut rng);
        let any_frame = alts.iter().any(|a| oracle_frame(&a.token).is_some());
        match extract_distribution(&alts, &order) {
            Err(ExtractError::NoUsableTokens) if !any_frame => off_format += 1,
            Err(e) => return Err(format!("case {case}: unexpected {e} for {alts:?}")),
            Ok(_) if !any_frame => return Err(format!("case {case}: expected NoUsableTokens")),
            Ok(d) => {
                check_distribution(&alts, &order, &d).map_err(|e| format!("case {case}: {e}"))?;
                ties += usize::from(d.tie);
                let mut shuffled = alts.clone();
                shuffled.shuffle(&mut rng);
                let again = extract_distribution(&shuffled, &order).map_err(|e| e.to_string())?;
                ensure(again == d, || {
                    format!("case {case}: permutation changed result")
                })?;
                ensure(extract_distribution(&alts, &order).unwrap() == d, || {
                    "nondeterministic".into()
                })?;
                usable.push((format!("item-{case:05}"), alts, order));
            }
        }
    }

    // Persist a classification per usable case, then re-derive from disk.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store_path = dir.path().join("classifications.jsonl");
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .unwrap();
    let definitions = default_frame_definitions();
    let params = ModelParams::default();
    let clock = FixedClock(stamp());
    let mut persisted = 0;
    let mut store = ClassificationStore::open(&store_path).map_err(|e| e.to_string())?;
    let by_order: BTreeMap<String, Vec<&Case>> = usable.iter().fold(BTreeMap::new(), |mut m, u| {
        m.entry(format!("{:?}", u.2)).or_default().push(u);
        m
    });
    for group in by_order.values() {
        let template = PromptTemplate {
            frame_order: group[0].2,
            ..PromptTemplate::default()
        };
        let provider = ScriptedCompletionProvider::new(
            group
                .iter()
                .map(|(id, alts, _)| ScriptedCompletion {
                    key: id.clone(),
                    alternatives: alts.clone(),
                })
                .collect(),
        );
        let inputs: Vec<ClassifyInput> = group
            .iter()
            .map(|(id, _, _)| ClassifyInput {
                item_id: id.clone(),
                text: format!("text of {id}"),
            })
            .collect();
        let ctx = ClassifyContext {
            template: &template,
            definitions: &definitions,
            params: &params,
            limiter: None,
            clock: &clock,
        };
        let out = rt
            .block_on(classify_corpus(&inputs, &ctx, &provider, &mut store, 8))
            .map_err(|e| e.to_string())?;
        ensure(out.failures.is_empty(), || {
            format!("classify failures {:?}", out.failures)
        })?;
        persisted += out.records.len();
    }
    let records: Vec<ClassificationRecord> =
        jsonl::read_all(&store_path).map_err(|e| e.to_string())?;
    ensure(records.len() == persisted, || "store size mismatch".into())?;
    for r in &records {
        ensure(r.rederives(), || {
            format!("{} does not re-derive", r.item_id)
        })?;
    }
    Ok(format!(
        "{EXTRACTION_CASES} cases ({} usable, {off_format} off-format, {ties} ties), {} records re-derived",
        usable.len(),
        records.len()
    ))
}

fn length_bin_normalization() -> Outcome {
    // (word count, agrees)
    let items: [(usize, bool); 12] = [
        (40, true),
        (90, false),
        (100, true),
        (150, true),
        (160, false),
        (199, false),
        (200, true),
        (220, false),
        (250, false),
        (299, false),
        (800, true),
        (1500, true),
    ];
    let order = FrameOrder::default();
    let pairs: Vec<JoinedPair> = items
        .iter()
        .enumerate()
        .map(|(i, (words, agree))| {
            let machine = Frame::Conflict;
            let human = if *agree {
                Frame::Conflict
            } else {
                Frame::Economic
            };
            JoinedPair {
                item_id: format!("i{i}"),
                annotator_id: "a".into(),
                model_id: "m".into(),
                human,
                alternative: None,
                machine,
                distribution: extract_distribution(&[TokenProb::new("Conflict", 0.0)], &order)
                    .unwrap(),
                agreement: *agree,
                word_count: Some(*words),
            }
        })
        .collect();
    let r = length_bins(&pairs, LengthGrouping::Agreement, BinSpec::default());

    let sixth = 1.0 / 6.0;
    let hand_within_bin: [(usize, [f64; 2]); 4] = [
        (0, [0.5, 0.5]),
        (1, [0.5, 0.5]),
        (2, [0.25, 0.75]),
        (8, [1.0, 0.0]),
    ];
    let hand_within_group: [[f64; 2]; 9] = [
        [sixth, sixth],
        [2.0 * sixth, 2.0 * sixth],
        [sixth, 3.0 * sixth],
        [0.0, 0.0],
        [0.0, 0.0],
        [0.0, 0.0],
        [0.0, 0.0],
        [0.0, 0.0],
        [2.0 * sixth, 0.0],
    ];
    for (bin, row) in &r.within_bin.iter().enumerate().collect::<Vec<_>>() {
        let n = r.counts[*bin][0] + r.counts[*bin][1];
        if n > 0 {
            let s = row[0] + row[1];
            ensure((s - 1.0).abs() <= NORMALIZATION_TOL, || {
                format!("bin {bin} sums to {s}")
            })?;
        }
    }
    for g in 0..2 {
        let s: f64 = r.within_group.iter().map(|row| row[g]).sum();
        ensure((s - 1.0).abs() <= NORMALIZATION_TOL, || {
            format!("group {g} sums to {s}")
        })?;
    }
    for (bin, expected) in hand_within_bin {
        for (g, expected) in expected.iter().enumerate() {
            ensure(
                (r.within_bin[bin][g] - expected).abs() <= NORMALIZATION_TOL,
                || format!("within_bin[{bin}][{g}] = {}", r.within_bin[bin][g]),
            )?;
        }
    }
    for (bin, expected) in hand_within_group.iter().enumerate() {
        for (g, expected) in expected.iter().enumerate() {
            ensure(
                (r.within_group[bin][g] - expected).abs() <= NORMALIZATION_TOL,
                || format!("within_group[{bin}][{g}] = {}", r.within_group[bin][g]),
            )?;
        }
    }
    ensure(r.total() == 12, || "raw total".into())?;
    Ok("12 items, 4 nonempty bins; both tables match hand values".into())
}

fn argmax_identity(extra: &[JoinedPair]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA9A9);
    let mut pairs = Vec::new();
    while pairs.len() < ARGMAX_CASES {
        let alts = random_alternatives(&mut rng);
        let order = random_order(&mut rng);
        let Ok(d) = extract_distribution(&alts, &order) else {
            continue;
        };
        let human = if rng.random_bool(0.5) {
            d.predominant
        } else {
            *Frame::ALL.choose(&mut rng).unwrap()
        };
        pairs.push(JoinedPair {
            item_id: format!("r{}", pairs.len()),
            annotator_id: "a".into(),
            model_id: "m".into(),
            human,
            alternative: None,
            machine: d.predominant,
            agreement: human == d.predominant,
            distribution: d,
            word_count: Some(rng.random_range(0..1200)),
        });
    }
    pairs.extend_from_slice(extra);
    let mut agreeing = 0;
    for p in pairs.iter().filter(|p| p.agreement) {
        agreeing += 1;
        let prob = human_label_probability(p, false);
        ensure(prob == p.distribution.max_mass(), || {
            format!("{}: P {prob} != max", p.item_id)
        })?;
        for f in Frame::ALL {
            ensure(prob >= p.distribution.mass_of(f), || {
                format!("{}: {f} exceeds human label", p.item_id)
            })?;
        }
    }
    let report = analysis::probability_histogram(&pairs, false);
    for g in [&report.agreement, &report.disagreement] {
        let total: u64 = g.histogram.iter().sum();
        ensure(total as usize == g.count, || {
            "histogram mass != group count".into()
        })?;
    }
    ensure(report.agreement.count == agreeing, || {
        "agreement count".into()
    })?;
    Ok(format!(
        "{agreeing} agreeing pairs of {} ({} from the pipeline run)",
        pairs.len(),
        extra.len()
    ))
}

// ---------------------------------------------------------------- pipeline

/// Counts TCP connections; pointed to by every proxy variable so any HTTP
/// request from a child process is seen here.
struct NetTrap {
    url: String,
    hits: Arc<AtomicUsize>,
}

impl NetTrap {
    fn start() -> NetTrap {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                counter.fetch_add(1, Ordering::SeqCst);
                drop(stream);
            }
        });
        NetTrap { url, hits }
    }

    fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

fn frames(dir: &Path, args: &[&str], trap: &NetTrap, env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.current_dir(dir).args(args);
    for var in [
        "FRAMES_CONFIG",
        "FRAMES_LLM_API_KEY",
        "FRAMES_TRANSLATE_API_KEY",
        "FRAMES_SEED",
        "FRAMES_CONCURRENCY",
        "FRAMES_LLM_ENDPOINT",
        "FRAMES_LLM_MODEL",
        "FRAMES_TRANSLATE_ENDPOINT",
        "SOURCE_DATE_EPOCH",
        "NO_PROXY",
        "no_proxy",
    ] {
        cmd.env_remove(var);
    }
    for var in [
        "HTTP_PROXY",
        "HTTPS_PROXY",
        "ALL_PROXY",
        "http_proxy",
        "https_proxy",
        "all_proxy",
    ] {
        cmd.env(var, &trap.url);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("run frames")
}

fn run_ok(dir: &Path, args: &[&str], trap: &NetTrap) -> Result<String, String> {
    let out = frames(dir, args, trap, &[]);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "`frames {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

struct Lexicon(HashMap<String, Frame>);

impl Lexicon {
    /// Read straight from the shipped data file.
    fn load() -> Lexicon {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/lexicon.jsonl");
        let mut map = HashMap::new();
        for line in std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .filter(|l| !l.trim().is_empty())
        {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let frame: Frame = v["frame"].as_str().unwrap().parse().unwrap();
            for k in v["keywords"].as_array().unwrap() {
                map.insert(k.as_str().unwrap().to_string(), frame);
            }
        }
        Lexicon(map)
    }

    fn words_of(&self, frame: Frame) -> Vec<&str> {
        let mut w: Vec<&str> = self
            .0
            .iter()
            .filter(|(_, f)| **f == frame)
            .map(|(k, _)| k.as_str())
            .collect();
        w.sort();
        w
    }

    /// Brute-force recount: keyword hits per frame, argmax in default
    /// order with the earliest frame winning ties.
    fn predict(&self, text: &str) -> Option<Frame> {
        let mut hits: HashMap<Frame, usize> = HashMap::new();
        for word in text.split(|c: char| !c.is_alphanumeric()) {
            if let Some(f) = self.0.get(&word.to_lowercase()) {
                *hits.entry(*f).or_default() += 1;
            }
        }
        let mut best: Option<(Frame, usize)> = None;
        for f in FrameOrder::default().iter() {
            let n = hits.get(&f).copied().unwrap_or(0);
            if n > 0 && best.is_none_or(|(_, b)| n > b) {
                best = Some((f, n));
            }
        }
        best.map(|(f, _)| f)
    }
}

const FILLER: [&str; 14] = [
    "the", "and", "of", "reporter", "today", "said", "that", "this", "was", "in", "studio",
    "viewers", "tonight", "report",
];

struct Synthetic {
    id: String,
    program: &'static str,
    text: String,
    human: Frame,
    alternative: Option<Frame>,
}

fn synthetic_corpus(lex: &Lexicon, n: usize, seed: u64) -> Vec<Synthetic> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let dominant = *Frame::ALL.choose(&mut rng).unwrap();
            let len = rng.random_range(30..1100);
            let mut words = vec![lex.words_of(dominant).choose(&mut rng).unwrap().to_string()];
            while words.len() < len {
                let w = if rng.random_bool(0.1) {
                    let f = if rng.random_bool(0.6) {
                        dominant
                    } else {
                        *Frame::ALL.choose(&mut rng).unwrap()
                    };
                    lex.words_of(f).choose(&mut rng).unwrap().to_string()
                } else {
                    FILLER.choose(&mut rng).unwrap().to_string()
                };
                let w = if rng.random_bool(0.05) {
                    w.to_uppercase()
                } else {
                    w
                };
                let w = match rng.random_range(0..20) {
                    0 => format!("{w}."),
                    1 => format!("{w},"),
                    _ => w,
                };
                words.push(w);
            }
            let text = words.join(if rng.random_bool(0.2) { "  " } else { " " });
            let predicted = lex.predict(&text).expect("seeded keyword");
            let human = if rng.random_bool(0.55) {
                predicted
            } else {
                *Frame::ALL.choose(&mut rng).unwrap()
            };
            let alternative = if rng.random_bool(0.3) {
                Frame::ALL
                    .iter()
                    .copied()
                    .filter(|f| *f != human)
                    .collect::<Vec<_>>()
                    .choose(&mut rng)
                    .copied()
            } else {
                None
            };
            Synthetic {
                id: format!("item-{i:04}"),
                program: if i % 2 == 0 {
                    "EenVandaag"
                } else {
                    "Nieuwsuur"
                },
                text,
                human,
                alternative,
            }
        })
        .collect()
}

fn write_csv_corpus(path: &Path, items: &[Synthetic]) {
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record(["item_id", "program", "air_date", "language", "text"])
        .unwrap();
    for s in items {
        w.write_record([
            s.id.as_str(),
            s.program,
            "2016-03-01",
            "nl",
            s.text.as_str(),
        ])
        .unwrap();
    }
    w.flush().unwrap();
}

struct PipelineRun {
    root: tempfile::TempDir,
    pairs: Vec<JoinedPair>,
}

/// ingest → translate → classify → batches → annotate → analyze → export.
fn run_pipeline(items: &[Synthetic], trap: &NetTrap) -> Result<PipelineRun, String> {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = root.path();
    write_csv_corpus(&dir.join("input.csv"), items);
    run_ok(
        dir,
        &[
            "ingest",
            "--input",
            "input.csv",
            "--out",
            "store/corpus.jsonl",
        ],
        trap,
    )?;
    run_ok(
        dir,
        &[
            "--now",
            NOW,
            "translate",
            "--provider",
            "passthrough",
            "--corpus",
            "store/corpus.jsonl",
            "--out",
            "store/translations.jsonl",
        ],
        trap,
    )?;
    run_ok(
        dir,
        &[
            "--now",
            NOW,
            "classify",
            "--provider",
            "lexicon",
            "--corpus",
            "store/corpus.jsonl",
            "--translations",
            "store/translations.jsonl",
            "--out",
            "store/classifications.jsonl",
        ],
        trap,
    )?;
    run_ok(
        dir,
        &[
            "--now",
            NOW,
            "batches",
            "--corpus",
            "store/corpus.jsonl",
            "--out",
            "store/batches.jsonl",
            "--per-batch",
            "10",
            "--n-batches",
            "5",
            "--seed",
            "11",
        ],
        trap,
    )?;

    // Scripted annotator, going through the same validation as the API.
    let corpus: Vec<TranscriptItem> =
        jsonl::read_all(&dir.join("store/corpus.jsonl")).map_err(|e| e.to_string())?;
    let translations = TranslationCache::open(&dir.join("store/translations.jsonl"))
        .map_err(|e| e.to_string())?
        .by_item(None);
    let texts = ShownTexts::build(&corpus, &translations);
    let mut store =
        AnnotationStore::open(&dir.join("store/annotations.jsonl")).map_err(|e| e.to_string())?;
    let clock = FixedClock(stamp());
    for s in items {
        let evidence: Vec<String> = s
            .text
            .split_whitespace()
            .take(4)
            .map(String::from)
            .collect();
        let sub = AnnotationSubmission {
            item_id: s.id.clone(),
            annotator_id: None,
            main_frame: s.human.label().to_string(),
            alternative_frame: s.alternative.map(|f| f.id().to_string()),
            evidence_sentences: vec![evidence.join(" ")],
            comments: None,
        };
        let stored =
            record_annotation(&sub, &texts, &mut store, &clock).map_err(|e| e.to_string())?;
        ensure(stored.evidence_verified, || {
            format!("{}: evidence not verified", s.id)
        })?;
    }
    drop(store);

    run_ok(
        dir,
        &[
            "analyze",
            "--annotations",
            "store/annotations.jsonl",
            "--classifications",
            "store/classifications.jsonl",
            "--out",
            "reports",
        ],
        trap,
    )?;
    run_ok(
        dir,
        &[
            "export",
            "--annotations",
            "store/annotations.jsonl",
            "--classifications",
            "store/classifications.jsonl",
            "--out",
            "exports",
            "--format",
            "csv",
        ],
        trap,
    )?;
    let anns: Vec<Annotation> =
        jsonl::read_all(&dir.join("store/annotations.jsonl")).map_err(|e| e.to_string())?;
    let cls: Vec<ClassificationRecord> =
        jsonl::read_all(&dir.join("store/classifications.jsonl")).map_err(|e| e.to_string())?;
    let pairs = join_records(&anns, &cls).pairs;
    Ok(PipelineRun { root, pairs })
}

fn read_confusion(path: &Path) -> Result<BTreeMap<(Frame, Frame), u64>, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let header: Vec<Frame> = r
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .skip(1)
        .map(|h| h.parse().map_err(|e| format!("{e}")))
        .collect::<Result<_, _>>()?;
    let mut out = BTreeMap::new();
    for row in r.records() {
        let row = row.map_err(|e| e.to_string())?;
        let human: Frame = row[0].parse().map_err(|e| format!("{e}"))?;
        for (i, machine) in header.iter().enumerate() {
            let n: u64 = row[i + 1].parse().map_err(|e| format!("{e}"))?;
            out.insert((human, *machine), n);
        }
    }
    Ok(out)
}

/// Sanity check that the trap really sees HTTP traffic from the binary.
fn trap_catches_http(trap: &NetTrap) -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut f = std::fs::File::create(dir.path().join("frames.toml")).unwrap();
    writeln!(f, "[retry]\ninitial_delay_secs = 0.01\nmax_attempts = 2").unwrap();
    std::fs::write(
        dir.path().join("corpus.jsonl"),
        "{\"item_id\":\"a\",\"program\":\"P\",\"language\":\"en\",\"text\":\"war\",\"word_count\":1}\n",
    )
    .unwrap();
    let before = trap.hits();
    let out = frames(
        dir.path(),
        &[
            "classify",
            "--provider",
            "http_llm",
            "--endpoint",
            "http://192.0.2.1:9/v1/completions",
        ],
        trap,
        &[("FRAMES_LLM_API_KEY", "dummy")],
    );
    ensure(out.status.code() == Some(1), || {
        format!("http classify exit {:?}", out.status.code())
    })?;
    ensure(trap.hits() > before, || {
        "network trap saw no traffic from an http provider".into()
    })
}

fn end_to_end(
    items: &[Synthetic],
    lex: &Lexicon,
    run: &PipelineRun,
    trap: &NetTrap,
    net_baseline: usize,
) -> Outcome {
    let dir = run.root.path();
    ensure(trap.hits() == net_baseline, || {
        format!("{} network connections", trap.hits() - net_baseline)
    })?;

    let mut expected: BTreeMap<(Frame, Frame), u64> = BTreeMap::new();
    for h in Frame::ALL {
        for m in Frame::ALL {
            expected.insert((h, m), 0);
        }
    }
    for s in items {
        *expected
            .get_mut(&(s.human, lex.predict(&s.text).unwrap()))
            .unwrap() += 1;
    }
    let got = read_confusion(&dir.join("reports/confusion.csv"))?;
    ensure(got == expected, || {
        format!("confusion differs from recount:\n{got:?}\n{expected:?}")
    })?;
    let agree: u64 = Frame::ALL.iter().map(|f| expected[&(*f, *f)]).sum();

    let files = [
        "confusion.csv",
        "agreement.json",
        "length_bins.csv",
        "prob_hist.csv",
        "alternatives_bins.csv",
    ];
    for f in files {
        ensure(dir.join("reports").join(f).is_file(), || {
            format!("missing report {f}")
        })?;
    }
    let agreement: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("reports/agreement.json")).unwrap())
            .map_err(|e| e.to_string())?;
    let acc = agreement["accuracy"].as_f64().unwrap_or(-1.0);
    ensure(
        (acc - agree as f64 / items.len() as f64).abs() <= ACCURACY_TOL,
        || format!("accuracy {acc}"),
    )?;
    Ok(format!(
        "{} items, {agree} agreements, confusion identical to recount, 0 connections",
        items.len()
    ))
}

fn store_and_report_files(root: &Path) -> Vec<PathBuf> {
    let mut files = Vec::new();
    for sub in ["store", "reports", "exports"] {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(root.join(sub))
            .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).collect())
            .unwrap_or_default();
        entries.retain(|p| {
            p.extension()
                .is_some_and(|e| e == "jsonl" || e == "csv" || e == "json")
        });
        entries.sort();
        files.extend(
            entries
                .into_iter()
                .map(|p| p.strip_prefix(root).unwrap().to_path_buf()),
        );
    }
    files
}

fn determinism(a: &PipelineRun, b: &PipelineRun) -> Outcome {
    let fa = store_and_report_files(a.root.path());
    let fb = store_and_report_files(b.root.path());
    ensure(fa == fb, || format!("file sets differ: {fa:?} vs {fb:?}"))?;
    ensure(fa.len() >= 10, || {
        format!("only {} files compared", fa.len())
    })?;
    for rel in &fa {
        let x = std::fs::read(a.root.path().join(rel)).unwrap();
        let y = std::fs::read(b.root.path().join(rel)).unwrap();
        ensure(x == y, || format!("{} differs between runs", rel.display()))?;
    }
    Ok(format!(
        "{} store and report files byte-identical",
        fa.len()
    ))
}

fn batch_generation(trap: &NetTrap) -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = root.path();
    let mut body = String::new();
    for i in 0..1000 {
        body.push_str(&format!(
            "{{\"item_id\":\"ev-{i:04}\",\"program\":\"EenVandaag\",\"language\":\"nl\",\"text\":\"tekst {i}\"}}\n"
        ));
    }
    std::fs::write(dir.join("input.jsonl"), body).unwrap();
    run_ok(
        dir,
        &["ingest", "--input", "input.jsonl", "--out", "corpus.jsonl"],
        trap,
    )?;
    run_ok(
        dir,
        &[
            "--now",
            NOW,
            "batches",
            "--corpus",
            "corpus.jsonl",
            "--out",
            "batches.jsonl",
        ],
        trap,
    )?;
    let batches: Vec<AnnotationBatch> =
        jsonl::read_all(&dir.join("batches.jsonl")).map_err(|e| e.to_string())?;
    ensure(batches.len() == 20, || format!("{} batches", batches.len()))?;
    ensure(batches.iter().all(|b| b.item_ids.len() == 50), || {
        "batch sizes".into()
    })?;
    let all: Vec<&String> = batches.iter().flat_map(|b| &b.item_ids).collect();
    let distinct: BTreeSet<&String> = all.iter().copied().collect();
    ensure(all.len() == 1000 && distinct.len() == 1000, || {
        "not a disjoint partition".into()
    })?;
    let expected: BTreeSet<String> = (0..1000).map(|i| format!("ev-{i:04}")).collect();
    ensure(
        distinct.into_iter().cloned().collect::<BTreeSet<_>>() == expected,
        || "union != corpus".into(),
    )?;
    Ok("20 batches x 50, disjoint, union = 1000 items".into())
}

// ---------------------------------------------------------------- driver

struct Report {
    failed: usize,
    total: usize,
}

impl Report {
    fn record(&mut self, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(l)) if elapsed > l => Err(format!("took {elapsed:?}, limit {l:?}")),
            (o, _) => o,
        };
        self.total += 1;
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} ({} ms)", elapsed.as_millis()),
            Err(why) => {
                self.failed += 1;
                println!("FAIL {name}: {why} ({} ms)", elapsed.as_millis());
            }
        }
    }
}

fn main() {
    let mut report = Report {
        failed: 0,
        total: 0,
    };
    let trap = NetTrap::start();

    report.record(
        "published confusion-matrix accuracy",
        Some(Duration::from_secs(1)),
        published_matrix_accuracy,
    );
    report.record(
        "nieuwsuur row totals",
        Some(Duration::from_secs(1)),
        nieuwsuur_rows,
    );
    report.record(
        "distribution extraction properties",
        Some(Duration::from_secs(10)),
        extraction_properties,
    );

    let lex = Lexicon::load();
    let items = synthetic_corpus(&lex, E2E_ITEMS, 2024);
    let mut first: Option<PipelineRun> = None;
    report.record(
        "end-to-end offline run",
        Some(Duration::from_secs(30)),
        || {
            trap_catches_http(&trap)?;
            let baseline = trap.hits();
            let run = run_pipeline(&items, &trap)?;
            let out = end_to_end(&items, &lex, &run, &trap, baseline);
            first = Some(run);
            out
        },
    );

    report.record(
        "length-bin dual normalization",
        Some(Duration::from_secs(1)),
        length_bin_normalization,
    );
    let pipeline_pairs = first.as_ref().map(|r| r.pairs.clone()).unwrap_or_default();
    report.record(
        "probability report argmax identity",
        Some(Duration::from_secs(5)),
        || argmax_identity(&pipeline_pairs),
    );
    report.record("determinism", None, || {
        let a = first.as_ref().ok_or("first pipeline run failed")?;
        let b = run_pipeline(&items, &trap)?;
        determinism(a, &b)
    });
    report.record("batch generation", None, || batch_generation(&trap));

    println!(
        "acceptance: {} of {} criteria passed",
        report.total - report.failed,
        report.total
    );
    if report.failed > 0 {
        std::process::exit(1);
    }
}
