use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions, TryLockError};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::Serialize;

use frames_core::analysis::{self, AnalysisOptions, BinSpec, ExportFormat};
use frames_core::annotation::{self, Annotation, AnnotationStore, ShownTexts};
use frames_core::classifier::{
    classify_corpus, ClassificationRecord, ClassificationStore, ClassifyContext, ClassifyInput,
};
use frames_core::clock::{Clock, FixedClock, SystemClock};
use frames_core::corpus::{self, CorpusFormat, TranscriptItem};
use frames_core::framing::{
    default_frame_definitions, load_frame_definitions, FrameDefinition, FrameOrder, PromptTemplate,
};
use frames_core::jsonl::{self, write_atomic};
use frames_core::translation::{translate_corpus, TranslationCache, TranslationRecord};

use crate::config::{self, Overrides, PipelineConfig};
use crate::{
    AnalyzeArgs, ClassifyArgs, Cli, Command, ExportArgs, IngestArgs, PromptArgs, StatsArgs,
    TranslateArgs,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_PARTIAL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

pub const LOCK_FILE: &str = ".frames.lock";

#[derive(Debug)]
pub enum CmdError {
    /// Bad flags, config or missing inputs: exit 2.
    Usage(String),
    /// The command started but could not finish: exit 1.
    Fatal(String),
}

type CmdResult = Result<u8, CmdError>;

fn usage(msg: impl Into<String>) -> CmdError {
    CmdError::Usage(msg.into())
}

fn fatal(err: impl std::fmt::Display) -> CmdError {
    CmdError::Fatal(err.to_string())
}

pub fn run(cli: Cli) -> u8 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(CmdError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!(
                "usage: frames [--config FILE] [--show-config] [--now TIME] <COMMAND> [OPTIONS]"
            );
            eprintln!("run `frames --help` for the command list");
            EXIT_USAGE
        }
        Err(CmdError::Fatal(msg)) => {
            eprintln!("error: {msg}");
            EXIT_PARTIAL
        }
    }
}

fn dispatch(cli: Cli) -> CmdResult {
    let flags = cli.command.as_ref().map(flag_overrides).unwrap_or_default();
    let env = config::env_overrides(|k| std::env::var(k).ok());
    let file = config::locate(cli.config.as_deref()).map_err(usage)?;
    let cfg = config::resolve(file.as_deref(), &env, &flags).map_err(usage)?;

    if cli.show_config {
        print!(
            "{}",
            cfg.render(
                api_key(frames_core::classifier::API_KEY_ENV).is_some(),
                api_key(frames_core::translation::API_KEY_ENV).is_some(),
            )
        );
        return Ok(EXIT_OK);
    }
    let Some(command) = cli.command else {
        return Err(usage("no command given"));
    };
    let clock = make_clock(cli.now.as_deref(), std::env::var("SOURCE_DATE_EPOCH").ok())?;
    match command {
        Command::Ingest(a) => ingest(&cfg, &a),
        Command::Stats(a) => stats(&cfg, &a),
        Command::Translate(a) => translate(&cfg, &a, clock.as_ref()),
        Command::Classify(a) => classify(&cfg, &a, clock.as_ref()),
        Command::Batches(_) => batches(&cfg, clock.as_ref()),
        Command::Serve(_) => serve(&cfg, clock),
        Command::Analyze(a) => analyze(&cfg, &a),
        Command::Export(a) => export(&cfg, &a),
    }
}

fn api_key(var: &str) -> Option<String> {
    std::env::var(var).ok().filter(|k| !k.trim().is_empty())
}

fn set_prompt(o: &mut Overrides, p: &PromptArgs) {
    o.set_path("prompt.template", p.template.as_deref())
        .set_path("prompt.definitions", p.definitions.as_deref())
        .set_opt("prompt.frame_order", p.frame_order.clone());
}

fn int(v: Option<usize>) -> Option<i64> {
    v.map(|v| v as i64)
}

/// Maps a subcommand's flags onto config keys.
fn flag_overrides(command: &Command) -> Overrides {
    let mut o = Overrides::default();
    match command {
        Command::Ingest(a) => {
            o.set_path("paths.corpus", a.out.as_deref());
        }
        Command::Stats(a) => {
            o.set_path("paths.corpus", a.corpus.as_deref());
        }
        Command::Translate(a) => {
            o.set_path("paths.corpus", a.corpus.as_deref())
                .set_path("paths.translations", a.out.as_deref())
                .set_opt("translation.provider", a.provider.clone())
                .set_opt("translation.endpoint", a.endpoint.clone())
                .set_opt("translation.target_language", a.target.clone())
                .set_path("translation.fixture", a.fixture.as_deref())
                .set_opt("concurrency", int(a.concurrency));
        }
        Command::Classify(a) => {
            o.set_path("paths.corpus", a.corpus.as_deref())
                .set_path("paths.translations", a.translations.as_deref())
                .set_path("paths.classifications", a.out.as_deref())
                .set_opt("classifier.provider", a.provider.clone())
                .set_opt("classifier.model_id", a.model.clone())
                .set_opt("classifier.temperature", a.temperature)
                .set_opt("classifier.top_p", a.top_p)
                .set_opt("classifier.max_alternatives", int(a.max_alternatives))
                .set_opt("classifier.endpoint", a.endpoint.clone())
                .set_path("classifier.fixture", a.fixture.as_deref())
                .set_path("classifier.lexicon", a.lexicon.as_deref())
                .set_opt("classifier.rate_limit", a.rate_limit)
                .set_opt("concurrency", int(a.concurrency));
            set_prompt(&mut o, &a.prompt);
        }
        Command::Batches(a) => {
            o.set_path("paths.corpus", a.corpus.as_deref())
                .set_path("paths.batches", a.out.as_deref())
                .set_opt("batches.per_batch", int(a.per_batch))
                .set_opt("batches.n_batches", int(a.n_batches))
                .set_opt("seed", a.seed.map(|s| s as i64));
        }
        Command::Serve(a) => {
            o.set_opt("serve.port", a.port.map(i64::from))
                .set_opt("serve.bind", a.bind.clone())
                .set_path("serve.static_dir", a.static_dir.as_deref())
                .set_path("paths.corpus", a.corpus.as_deref())
                .set_path("paths.translations", a.translations.as_deref())
                .set_path("paths.batches", a.batches.as_deref())
                .set_path("paths.annotations", a.annotations.as_deref());
            set_prompt(&mut o, &a.prompt);
        }
        Command::Analyze(a) => {
            o.set_path("paths.annotations", a.annotations.as_deref())
                .set_path("paths.classifications", a.classifications.as_deref())
                .set_path("paths.reports", a.out.as_deref())
                .set_opt("analysis.format", a.format.clone())
                .set_opt("analysis.bin_width", int(a.bin_width))
                .set_opt("analysis.cap", int(a.cap))
                .set_opt("analysis.renormalize", a.renormalize.then_some(true))
                .set_opt("prompt.frame_order", a.frame_order.clone())
                .set_path("prompt.template", a.template.as_deref())
                .set_path("paths.corpus", a.corpus.as_deref());
        }
        Command::Export(a) => {
            o.set_path("paths.annotations", a.annotations.as_deref())
                .set_path("paths.classifications", a.classifications.as_deref())
                .set_path("paths.reports", a.out.as_deref())
                .set_opt("analysis.format", a.format.clone());
        }
    }
    o
}

/// `--now` wins over SOURCE_DATE_EPOCH; both take Unix seconds or RFC 3339.
fn make_clock(flag: Option<&str>, env: Option<String>) -> Result<Arc<dyn Clock>, CmdError> {
    let raw = flag
        .map(str::to_string)
        .or(env.filter(|s| !s.trim().is_empty()));
    let Some(raw) = raw else {
        return Ok(Arc::new(SystemClock));
    };
    let raw = raw.trim();
    if let Ok(secs) = raw.parse::<i64>() {
        return FixedClock::from_unix(secs)
            .map(|c| Arc::new(c) as Arc<dyn Clock>)
            .ok_or_else(|| usage(format!("timestamp {raw} out of range")));
    }
    DateTime::parse_from_rfc3339(raw)
        .map(|t| Arc::new(FixedClock(t.with_timezone(&Utc))) as Arc<dyn Clock>)
        .map_err(|e| usage(format!("bad timestamp {raw:?}: {e}")))
}

/// Held for the life of a command that writes into a store directory.
struct StoreLock {
    _file: File,
}

fn lock_store_dir(store_file: &Path) -> Result<StoreLock, CmdError> {
    let dir = match store_file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir)
        .map_err(|e| fatal(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(LOCK_FILE);
    let file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&path)
        .map_err(|e| fatal(format!("cannot open lock {}: {e}", path.display())))?;
    match file.try_lock() {
        Ok(()) => Ok(StoreLock { _file: file }),
        Err(TryLockError::WouldBlock) => Err(fatal(format!(
            "another frames process is using the stores in {}",
            dir.display()
        ))),
        Err(TryLockError::Error(e)) => Err(fatal(format!("cannot lock {}: {e}", path.display()))),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CmdError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} not found", path.display())))
    }
}

fn load_corpus(path: &Path) -> Result<Vec<TranscriptItem>, CmdError> {
    require_file(path, "corpus")?;
    corpus::read_corpus(path).map_err(fatal)
}

fn runtime() -> Result<tokio::runtime::Runtime, CmdError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(fatal)
}

fn failures_path(explicit: Option<&Path>, store: &Path) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut name = store.file_name().unwrap_or_default().to_os_string();
        name.push(".failures.jsonl");
        store.with_file_name(name)
    })
}

/// Writes the failure report, or removes a stale one when nothing failed.
fn write_failures<T: Serialize>(path: &Path, failures: &[T]) -> Result<(), CmdError> {
    if failures.is_empty() {
        match std::fs::remove_file(path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(fatal(format!("cannot remove {}: {e}", path.display()))),
        }
    } else {
        jsonl::write_all(path, failures).map_err(fatal)?;
        eprintln!("{} failures written to {}", failures.len(), path.display());
        Ok(())
    }
}

fn ingest(cfg: &PipelineConfig, a: &IngestArgs) -> CmdResult {
    require_file(&a.input, "input")?;
    let format = match &a.format {
        Some(f) => f.clone(),
        None => a
            .input
            .extension()
            .map(|e| e.to_string_lossy().into_owned())
            .unwrap_or_else(|| "jsonl".into()),
    };
    let format: CorpusFormat = format.parse().map_err(|e| usage(format!("{e}")))?;
    let out = &cfg.paths.corpus;
    let _lock = lock_store_dir(out)?;
    let ingested = corpus::ingest_corpus(&a.input, format).map_err(fatal)?;
    corpus::write_corpus(out, &ingested.items).map_err(fatal)?;
    println!(
        "ingested {} items into {}",
        ingested.items.len(),
        out.display()
    );
    for m in &ingested.malformed {
        eprintln!("line {}: {}", m.line, m.reason);
    }
    write_failures(&failures_path(None, out), &ingested.malformed)?;
    Ok(if ingested.malformed.is_empty() {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    })
}

fn stats(cfg: &PipelineConfig, a: &StatsArgs) -> CmdResult {
    let items = load_corpus(&cfg.paths.corpus)?;
    let mut sections = vec![("original", corpus::corpus_stats(&items))];
    if let Some(path) = &a.translations {
        require_file(path, "translation store")?;
        let cache = TranslationCache::open(path).map_err(fatal)?;
        let by_item = cache.by_item(None);
        let translated: Vec<TranscriptItem> = items
            .iter()
            .filter_map(|i| {
                by_item.get(&i.item_id).map(|t| {
                    TranscriptItem::new(
                        &i.item_id,
                        &i.program,
                        &t.target_language,
                        &t.translated_text,
                    )
                })
            })
            .collect();
        sections.push(("translated", corpus::corpus_stats(&translated)));
    }
    if a.json {
        let map: BTreeMap<&str, _> = sections.into_iter().collect();
        println!("{}", serde_json::to_string_pretty(&map).map_err(fatal)?);
        return Ok(EXIT_OK);
    }
    for (name, rows) in sections {
        println!("[{name}]");
        println!(
            "{:<24} {:>7} {:>11} {:>7} {:>7}",
            "program", "items", "mean_words", "min", "max"
        );
        for r in rows {
            println!(
                "{:<24} {:>7} {:>11.1} {:>7} {:>7}",
                r.program, r.count, r.mean_word_count, r.min_word_count, r.max_word_count
            );
        }
    }
    Ok(EXIT_OK)
}

fn translate(cfg: &PipelineConfig, a: &TranslateArgs, clock: &dyn Clock) -> CmdResult {
    let items = load_corpus(&cfg.paths.corpus)?;
    let tcfg = cfg
        .translation_config(api_key(frames_core::translation::API_KEY_ENV))
        .map_err(usage)?;
    let translator = tcfg.build().map_err(|e| usage(e.to_string()))?;
    let out = &cfg.paths.translations;
    let _lock = lock_store_dir(out)?;
    let mut cache = TranslationCache::open(out).map_err(fatal)?;
    if a.force {
        let ids = items.iter().map(|i| i.item_id.clone()).collect();
        let targets: BTreeSet<String> = items
            .iter()
            .map(|i| translator.effective_target(i, &tcfg.target_language))
            .collect();
        for t in targets {
            cache
                .invalidate(&ids, translator.provider_id(), &t)
                .map_err(fatal)?;
        }
    }
    let outcome = runtime()?
        .block_on(translate_corpus(
            &items,
            translator.as_ref(),
            &tcfg.target_language,
            &mut cache,
            clock,
            cfg.concurrency,
        ))
        .map_err(fatal)?;
    write_failures(
        &failures_path(a.failures.as_deref(), out),
        &outcome.failures,
    )?;
    println!(
        "translated {} of {} items into {} ({} provider calls, {} failed)",
        outcome.records.len(),
        items.len(),
        out.display(),
        outcome.provider_calls,
        outcome.failures.len()
    );
    Ok(if outcome.failures.is_empty() {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    })
}

fn load_prompt(cfg: &PipelineConfig) -> Result<(PromptTemplate, Vec<FrameDefinition>), CmdError> {
    let mut template = match &cfg.prompt.template {
        Some(p) => {
            require_file(p, "template")?;
            PromptTemplate::load(p).map_err(|e| usage(e.to_string()))?
        }
        None => PromptTemplate::default(),
    };
    if let Some(order) = &cfg.prompt.frame_order {
        template.frame_order = FrameOrder::from_labels(order).map_err(|e| usage(e.to_string()))?;
    }
    template.validate().map_err(|e| usage(e.to_string()))?;
    let definitions = match &cfg.prompt.definitions {
        Some(p) => {
            require_file(p, "definitions")?;
            load_frame_definitions(p).map_err(|e| usage(e.to_string()))?
        }
        None => default_frame_definitions(),
    };
    Ok((template, definitions))
}

/// Latest translation per item from `path`, or nothing when it is absent.
fn load_translations(path: &Path) -> Result<HashMap<String, TranslationRecord>, CmdError> {
    if !path.is_file() {
        return Ok(HashMap::new());
    }
    Ok(TranslationCache::open(path).map_err(fatal)?.by_item(None))
}

fn classify(cfg: &PipelineConfig, a: &ClassifyArgs, clock: &dyn Clock) -> CmdResult {
    let items = load_corpus(&cfg.paths.corpus)?;
    let translations = if a.originals {
        HashMap::new()
    } else {
        if a.translations.is_some() {
            require_file(&cfg.paths.translations, "translation store")?;
        }
        load_translations(&cfg.paths.translations)?
    };
    let inputs: Vec<ClassifyInput> = items
        .iter()
        .map(|i| ClassifyInput {
            item_id: i.item_id.clone(),
            text: translations
                .get(&i.item_id)
                .map(|t| t.translated_text.clone())
                .unwrap_or_else(|| i.text.clone()),
        })
        .collect();
    let n_translated = items
        .iter()
        .filter(|i| translations.contains_key(&i.item_id))
        .count();

    let (template, definitions) = load_prompt(cfg)?;
    let ccfg = cfg
        .classifier_config(api_key(frames_core::classifier::API_KEY_ENV))
        .map_err(usage)?;
    let provider = ccfg.build().map_err(|e| usage(e.to_string()))?;
    let limiter = ccfg.rate_limiter();

    let out = &cfg.paths.classifications;
    let _lock = lock_store_dir(out)?;
    let mut store = ClassificationStore::open(out).map_err(fatal)?;
    let rt = runtime()?;
    let outcome = rt
        .block_on(async {
            let ctx = ClassifyContext {
                template: &template,
                definitions: &definitions,
                params: &ccfg.params,
                limiter: limiter.as_ref(),
                clock,
            };
            classify_corpus(
                &inputs,
                &ctx,
                provider.as_ref(),
                &mut store,
                cfg.concurrency,
            )
            .await
        })
        .map_err(fatal)?;
    write_failures(
        &failures_path(a.failures.as_deref(), out),
        &outcome.failures,
    )?;
    println!(
        "classified {} of {} items ({} translated) into {} ({} provider calls, {} failed, {} off-format)",
        outcome.records.len(),
        items.len(),
        n_translated,
        out.display(),
        outcome.provider_calls,
        outcome.failures.len(),
        outcome.no_usable_tokens
    );
    Ok(if outcome.failures.is_empty() {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    })
}

fn batches(cfg: &PipelineConfig, clock: &dyn Clock) -> CmdResult {
    let items = load_corpus(&cfg.paths.corpus)?;
    let b = &cfg.batches;
    let batches = annotation::generate_batches(&items, b.per_batch, b.n_batches, cfg.seed, clock)
        .map_err(fatal)?;
    let out = &cfg.paths.batches;
    let _lock = lock_store_dir(out)?;
    annotation::write_batches(out, &batches).map_err(fatal)?;
    let programs: BTreeSet<&str> = batches.iter().map(|b| b.program.as_str()).collect();
    println!(
        "wrote {} batches of {} items for {} program(s) into {}",
        batches.len(),
        b.per_batch,
        programs.len(),
        out.display()
    );
    Ok(EXIT_OK)
}

fn serve(cfg: &PipelineConfig, clock: Arc<dyn Clock>) -> CmdResult {
    let items = load_corpus(&cfg.paths.corpus)?;
    let translations = load_translations(&cfg.paths.translations)?;
    let batches = if cfg.paths.batches.is_file() {
        annotation::read_batches(&cfg.paths.batches).map_err(fatal)?
    } else {
        eprintln!(
            "warning: no batch file at {}; serving items only",
            cfg.paths.batches.display()
        );
        Vec::new()
    };
    let (template, definitions) = load_prompt(cfg)?;
    let ip: IpAddr = cfg
        .serve
        .bind
        .parse()
        .map_err(|e| usage(format!("bad bind address {:?}: {e}", cfg.serve.bind)))?;
    if let Some(dir) = &cfg.serve.static_dir {
        if !dir.is_dir() {
            return Err(usage(format!(
                "static directory {} not found",
                dir.display()
            )));
        }
    }
    let _lock = lock_store_dir(&cfg.paths.annotations)?;
    let store = AnnotationStore::open(&cfg.paths.annotations).map_err(fatal)?;
    let state = frames_server::AppState::new(
        ShownTexts::build(&items, &translations),
        batches,
        &definitions,
        template.frame_order,
        store,
        clock,
    );
    let app = frames_server::router(Arc::new(state), cfg.serve.static_dir.clone());
    runtime()?.block_on(async {
        let listener = frames_server::bind(SocketAddr::new(ip, cfg.serve.port))
            .await
            .map_err(fatal)?;
        let addr = listener.local_addr().map_err(fatal)?;
        println!("serving on http://{addr}");
        frames_server::serve(listener, app).await.map_err(fatal)
    })?;
    Ok(EXIT_OK)
}

fn analysis_order(cfg: &PipelineConfig) -> Result<FrameOrder, CmdError> {
    if let Some(order) = &cfg.prompt.frame_order {
        return FrameOrder::from_labels(order).map_err(|e| usage(e.to_string()));
    }
    match &cfg.prompt.template {
        Some(p) => {
            require_file(p, "template")?;
            Ok(PromptTemplate::load(p)
                .map_err(|e| usage(e.to_string()))?
                .frame_order)
        }
        None => Ok(FrameOrder::default()),
    }
}

fn read_store<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<Vec<T>, CmdError> {
    require_file(path, what)?;
    jsonl::read_all(path).map_err(fatal)
}

fn analyze(cfg: &PipelineConfig, a: &AnalyzeArgs) -> CmdResult {
    let annotations: Vec<Annotation> = read_store(&cfg.paths.annotations, "annotation store")?;
    let mut classifications: Vec<ClassificationRecord> =
        read_store(&cfg.paths.classifications, "classification store")?;
    if let Some(model) = &a.model {
        classifications.retain(|c| &c.model_id == model);
    }
    let format: ExportFormat = cfg
        .analysis
        .format
        .parse()
        .map_err(|e| usage(format!("{e}")))?;
    let opts = AnalysisOptions {
        order: analysis_order(cfg)?,
        bins: BinSpec::new(cfg.analysis.bin_width, cfg.analysis.cap)
            .map_err(|e| usage(e.to_string()))?,
        renormalize: cfg.analysis.renormalize,
    };
    let mut join = analysis::join_records(&annotations, &classifications);
    if a.corpus.is_some() {
        let items = load_corpus(&cfg.paths.corpus)?;
        let counts = items
            .into_iter()
            .map(|i| (i.item_id, i.word_count))
            .collect();
        analysis::fill_word_counts(&mut join.pairs, &counts);
    }
    let models: BTreeSet<&str> = join.pairs.iter().map(|p| p.model_id.as_str()).collect();
    if models.len() > 1 {
        eprintln!(
            "warning: pooling {} models; pass --model to pick one",
            models.len()
        );
    }
    let reports = analysis::analyze(&join, &opts);
    let files = analysis::export_reports(&reports, &cfg.paths.reports, format).map_err(fatal)?;

    println!(
        "joined {} pairs ({} unjoined annotations, {} unjoined classifications)",
        reports.n_joined, reports.n_unjoined_annotations, reports.n_unjoined_classifications
    );
    match &reports.agreement {
        Some(r) => println!(
            "accuracy {:.3} ({} of {})",
            r.accuracy,
            r.confusion.trace(),
            r.confusion.total()
        ),
        None => println!("accuracy undefined: no joined pairs"),
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct AnnotationRow<'a> {
    item_id: &'a str,
    annotator_id: &'a str,
    main_frame: &'a str,
    alternative_frame: &'a str,
    evidence_verified: bool,
    evidence_count: usize,
    evidence: String,
    shown_variant: &'a str,
    shown_word_count: Option<usize>,
    comments: &'a str,
    submitted_at: String,
}

fn export(cfg: &PipelineConfig, _a: &ExportArgs) -> CmdResult {
    let format: ExportFormat = cfg
        .analysis
        .format
        .parse()
        .map_err(|e| usage(format!("{e}")))?;
    let annotations: Vec<Annotation> = read_store(&cfg.paths.annotations, "annotation store")?;
    let classifications: Vec<ClassificationRecord> =
        read_store(&cfg.paths.classifications, "classification store")?;

    let mut latest_ann: BTreeMap<(&str, &str), &Annotation> = BTreeMap::new();
    for a in &annotations {
        latest_ann.insert((&a.item_id, &a.annotator_id), a);
    }
    let mut latest_cls: BTreeMap<(&str, &str), &ClassificationRecord> = BTreeMap::new();
    for c in &classifications {
        latest_cls.insert((&c.item_id, &c.model_id), c);
    }
    let out_dir = &cfg.paths.reports;
    let written = match format {
        ExportFormat::Json => {
            let anns: Vec<&Annotation> = latest_ann.into_values().collect();
            let cls: Vec<&ClassificationRecord> = latest_cls.into_values().collect();
            let a_path = out_dir.join("annotations.json");
            let c_path = out_dir.join("classifications.json");
            write_atomic(&a_path, &pretty(&anns)?).map_err(fatal)?;
            write_atomic(&c_path, &pretty(&cls)?).map_err(fatal)?;
            vec![a_path, c_path]
        }
        ExportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for a in latest_ann.values() {
                w.serialize(AnnotationRow {
                    item_id: &a.item_id,
                    annotator_id: &a.annotator_id,
                    main_frame: a.main_frame.id(),
                    alternative_frame: a.alternative_frame.map(|f| f.id()).unwrap_or(""),
                    evidence_verified: a.evidence_verified,
                    evidence_count: a.evidence_sentences.len(),
                    evidence: a.evidence_sentences.join("\n"),
                    shown_variant: match a.shown_variant {
                        annotation::TextVariant::Original => "original",
                        annotation::TextVariant::Translation => "translation",
                    },
                    shown_word_count: a.shown_word_count,
                    comments: a.comments.as_deref().unwrap_or(""),
                    submitted_at: a.submitted_at.to_rfc3339(),
                })
                .map_err(fatal)?;
            }
            let a_bytes = w.into_inner().map_err(fatal)?;

            let order = FrameOrder::default();
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header: Vec<String> =
                ["item_id", "model_id", "prompt_hash", "predominant", "tie"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect();
            header.extend(order.iter().map(|f| format!("p_{}", f.id())));
            header.extend(["unmatched_residual".to_string(), "created_at".to_string()]);
            w.write_record(&header).map_err(fatal)?;
            for c in latest_cls.values() {
                let d = &c.distribution;
                let mut row = vec![
                    c.item_id.clone(),
                    c.model_id.clone(),
                    c.prompt_hash.clone(),
                    d.predominant.id().to_string(),
                    d.tie.to_string(),
                ];
                row.extend(order.iter().map(|f| d.mass_of(f).to_string()));
                row.push(d.unmatched_residual.to_string());
                row.push(c.created_at.to_rfc3339());
                w.write_record(&row).map_err(fatal)?;
            }
            let c_bytes = w.into_inner().map_err(fatal)?;
            let a_path = out_dir.join("annotations.csv");
            let c_path = out_dir.join("classifications.csv");
            write_atomic(&a_path, &a_bytes).map_err(fatal)?;
            write_atomic(&c_path, &c_bytes).map_err(fatal)?;
            vec![a_path, c_path]
        }
    };
    for f in written {
        println!("wrote {}", f.display());
    }
    Ok(EXIT_OK)
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>, CmdError> {
    let mut out = serde_json::to_vec_pretty(v).map_err(fatal)?;
    out.push(b'\n');
    Ok(out)
}
