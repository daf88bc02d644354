use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use distractor_core::analysis::{analyze_ratings, eval_items, export_eval_sheet, read_ratings, TTestKind};
use distractor_core::corpus::{load_corpus, split_corpus, CorpusSplit, Mcq, SplitManifest};
use distractor_core::generation::{
    export_answer_dataset, export_ft_dataset, load_error_pool, load_results, run_generation, Approach, ErrorExplanation,
    ExampleSelector, GenerationResult, Generator, ResultsStore,
};
use distractor_core::llmclient::{ChatBackend, ExportSelection, LlmClient, OpenAiCompatible, ResponseCache};
use distractor_core::metrics::{
    aggregate, generated_distractors, human_distractors, match_results, render_table, solve_rate, LlmSolver, MatchReport,
};
use distractor_core::promptkit::PromptKit;
use distractor_core::ranking::{
    build_pair_dataset, export_ranker_training, preference_score, ranker_accuracy, ConstantRanker, LlmRanker, Ranker,
    RankerVerdict, RandomRanker, SelectionOracle,
};
use distractor_core::retrieval::{
    embed_corpus, EmbeddingCache, EmbeddingProvider, EmbeddingStore, LexicalEmbedder, PrecomputedVectors, RemoteEmbedder,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{BackendKind, EmbeddingProviderKind, RankerKind, RunConfig};
use crate::{CacheAction, Cli, CliError, Command};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";

pub fn dispatch(cli: &Cli, cfg: &RunConfig, backend: Option<Arc<dyn ChatBackend>>) -> Result<(), CliError> {
    let ctx = Ctx { cfg, backend };
    match &cli.command {
        Command::Ingest => ctx.ingest(),
        Command::Split => ctx.split_cmd(),
        Command::Embed(_) => ctx.embed(),
        Command::Generate(a) => ctx.generate(&a.approach.0),
        Command::Evaluate { approach, .. } => ctx.evaluate(&approach.0),
        Command::SolveRate { source, .. } => ctx.solve_rate(source),
        Command::PairsBuild { training_export } => ctx.pairs_build(*training_export),
        Command::RankScore { approach, accuracy, .. } => ctx.rank_score(&approach.0, *accuracy),
        Command::FtExport { answers, .. } => ctx.ft_export(*answers),
        Command::HumanevalExport {
            approach, seed, balance, ..
        } => ctx.humaneval_export(*approach, *seed, *balance),
        Command::HumanevalAnalyze { key, ratings, welch } => ctx.humaneval_analyze(key, ratings, *welch),
        Command::Cache { action } => ctx.cache(action),
    }
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    backend: Option<Arc<dyn ChatBackend>>,
}

impl Ctx<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn prepare_output(&self) -> Result<(), CliError> {
        let dir = &self.cfg.output_dir;
        fs::create_dir_all(dir.join("configs")).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join("configs").join(format!("{}.toml", self.cfg.hash()));
        write_file(&path, &self.cfg.to_toml())
    }

    /// Writes `payload` as pretty JSON with the config hash and command name
    /// prepended.
    fn report<T: Serialize>(&self, name: &str, command: &str, payload: &T) -> Result<(), CliError> {
        self.prepare_output()?;
        let mut doc = serde_json::Map::new();
        doc.insert("command".into(), json!(command));
        doc.insert("config_hash".into(), json!(self.cfg.hash()));
        match serde_json::to_value(payload).expect("report serializes") {
            Value::Object(fields) => doc.extend(fields),
            other => {
                doc.insert("report".into(), other);
            }
        }
        let mut text = serde_json::to_string_pretty(&Value::Object(doc)).expect("report serializes");
        text.push('\n');
        write_file(&self.out(name), &text)
    }

    fn corpus(&self) -> Result<Vec<Mcq>, CliError> {
        Ok(load_corpus(&self.cfg.corpus)?)
    }

    fn split(&self) -> Result<CorpusSplit, CliError> {
        let corpus = self.corpus()?;
        Ok(split_corpus(&corpus, self.cfg.split.ratio, self.cfg.split.seed)?)
    }

    fn client(&self) -> Result<LlmClient, CliError> {
        let b = &self.cfg.backend;
        let cache = match &b.cache_dir {
            Some(dir) => ResponseCache::open(dir)?,
            None => ResponseCache::in_memory(),
        };
        for fixture in &b.fixtures {
            let text = fs::read_to_string(fixture).map_err(|e| CliError::io(fixture, e))?;
            let summary = cache.import(&text)?;
            tracing::debug!(stage = "cache", fixture = %fixture.display(), added = summary.added, event = "fixture loaded");
        }
        let client = match (&self.backend, b.kind) {
            (Some(backend), _) => LlmClient::with_backend(cache, backend.clone()),
            (None, BackendKind::Replay) => LlmClient::replay(cache),
            (None, BackendKind::Remote) => {
                let remote = OpenAiCompatible::from_env(Duration::from_secs(b.timeout_secs))
                    .map_err(|e| CliError::config(format!("remote backend: {e:?}")))?;
                LlmClient::with_backend(cache, Arc::new(remote))
            }
        };
        Ok(client.concurrency(b.concurrency))
    }

    fn embedder(&self) -> Result<Box<dyn EmbeddingProvider>, CliError> {
        let e = &self.cfg.embedding;
        Ok(match e.provider {
            EmbeddingProviderKind::Lexical => Box::new(LexicalEmbedder::new(e.dim)),
            EmbeddingProviderKind::Precomputed => {
                let path = e
                    .vectors
                    .as_ref()
                    .ok_or_else(|| CliError::config("embedding.vectors is required for the precomputed provider"))?;
                Box::new(PrecomputedVectors::load(path)?)
            }
            EmbeddingProviderKind::Remote => {
                let base = std::env::var(distractor_core::llmclient::API_BASE_ENV)
                    .unwrap_or_else(|_| "https://api.openai.com/v1".into());
                let key = std::env::var(distractor_core::llmclient::API_KEY_ENV).ok();
                Box::new(RemoteEmbedder::new(&base, &e.model, key))
            }
        })
    }

    fn embeddings(&self, corpus: &[Mcq]) -> Result<(EmbeddingStore, String), CliError> {
        self.prepare_output()?;
        let provider = self.embedder()?;
        let mut cache = EmbeddingCache::open(&self.out(EMBEDDINGS_FILE))?;
        let store = embed_corpus(corpus, self.cfg.generation.encoding, provider.as_ref(), &mut cache)?;
        Ok((store, provider.id().to_string()))
    }

    fn error_pool(&self) -> Result<Option<Vec<ErrorExplanation>>, CliError> {
        match &self.cfg.generation.error_pool {
            Some(path) => Ok(Some(load_error_pool(path)?)),
            None => Ok(None),
        }
    }

    /// Embedder id as recorded in generator configs, without embedding.
    fn embedder_tag(&self, approach: Approach) -> Result<String, CliError> {
        if approach != Approach::Knn || self.cfg.generation.example_selector != ExampleSelector::Knn {
            return Ok(String::new());
        }
        Ok(self.embedder()?.id().to_string())
    }

    fn generator_config(&self, approach: Approach) -> Result<distractor_core::generation::GeneratorConfig, CliError> {
        let mut gc = self.cfg.generator_config(approach);
        gc.encoding = self.cfg.generation.encoding;
        gc.embedder = self.embedder_tag(approach)?;
        Ok(gc)
    }

    /// Stored results for `approach` under the current generator config.
    fn results_for(&self, approach: Approach) -> Result<Vec<GenerationResult>, CliError> {
        let path = self.out(RESULTS_FILE);
        if !path.exists() {
            return Err(CliError::data(format!(
                "no generation results at {}; run `generate` first",
                path.display()
            )));
        }
        let hash = self.generator_config(approach)?.config_hash();
        Ok(load_results(&path)?
            .into_iter()
            .filter(|r| r.approach == approach && r.config_hash == hash)
            .collect())
    }

    fn ingest(&self) -> Result<(), CliError> {
        let corpus = self.corpus()?;
        let mut topics: BTreeMap<String, usize> = BTreeMap::new();
        for m in &corpus {
            *topics.entry(m.topics.join(" > ")).or_default() += 1;
        }
        let with_selection = corpus.iter().filter(|m| m.selection.is_some()).count();
        let with_explanation = corpus.iter().filter(|m| m.key_explanation.is_some()).count();
        self.report(
            "ingest.json",
            "ingest",
            &json!({
                "mcqs": corpus.len(),
                "with_selection": with_selection,
                "with_explanation": with_explanation,
                "topics": topics,
            }),
        )?;
        println!("{} MCQs ({with_selection} with selection data, {with_explanation} with explanations)", corpus.len());
        for (t, n) in &topics {
            println!("  {n:>4}  {t}");
        }
        Ok(())
    }

    fn split_cmd(&self) -> Result<(), CliError> {
        let split = self.split()?;
        let manifest = SplitManifest::from_split(&split, self.cfg.split.ratio);
        self.report("split.json", "split", &manifest)?;
        println!("train {} / test {} (seed {})", split.train.len(), split.test.len(), split.seed);
        Ok(())
    }

    fn embed(&self) -> Result<(), CliError> {
        let corpus = self.corpus()?;
        let (store, provider) = self.embeddings(&corpus)?;
        let dim = corpus.first().and_then(|m| store.get(&m.id).ok()).map_or(0, |v| v.dim());
        self.report(
            "embed.json",
            "embed",
            &json!({ "provider": provider, "encoding": self.cfg.generation.encoding, "vectors": store.len(), "dim": dim }),
        )?;
        println!("{} vectors of dim {dim} from {provider}", store.len());
        Ok(())
    }

    fn generate(&self, approaches: &[Approach]) -> Result<(), CliError> {
        let split = self.split()?;
        let client = self.client()?;
        let prompts = PromptKit::builtin();
        let errors = self.error_pool()?;
        let needs_store =
            approaches.contains(&Approach::Knn) && self.cfg.generation.example_selector == ExampleSelector::Knn;
        let all: Vec<Mcq> = split.train.iter().chain(&split.test).cloned().collect();
        let store = if needs_store { Some(self.embeddings(&all)?.0) } else { None };
        self.prepare_output()?;
        let results = ResultsStore::open(&self.out(RESULTS_FILE))?;
        let mut summary = BTreeMap::new();
        for &approach in approaches {
            if approach == Approach::Rb && errors.is_none() {
                return Err(CliError::config("the rb approach needs generation.error_pool"));
            }
            let generator = Generator {
                config: self.generator_config(approach)?,
                client: &client,
                prompts: &prompts,
                pool: &split.train,
                embeddings: store.as_ref(),
                errors: errors.as_deref(),
            };
            let out = run_generation(&generator, &split.test, self.cfg.workers, &results)?;
            let null_slots: usize = out.iter().map(|r| r.candidates.iter().filter(|c| c.is_null()).count()).sum();
            let dropped: usize = out.iter().map(|r| r.provenance.parse.dropped_lines).sum();
            summary.insert(
                approach,
                json!({
                    "generator_config_hash": generator.config.config_hash(),
                    "mcqs": out.len(),
                    "null_slots": null_slots,
                    "dropped_lines": dropped,
                }),
            );
            println!("{approach:<4} {} MCQs, {null_slots} null slots", out.len());
        }
        self.report("generate.json", "generate", &json!({ "approaches": summary }))
    }

    fn match_reports(&self, approaches: &[Approach], test: &[Mcq]) -> Result<Vec<MatchReport>, CliError> {
        let mut reports = Vec::new();
        for &a in approaches {
            let results = self.results_for(a)?;
            reports.extend(match_results(test, &results, a)?);
        }
        Ok(reports)
    }

    fn evaluate(&self, approaches: &[Approach]) -> Result<(), CliError> {
        let split = self.split()?;
        let reports = self.match_reports(approaches, &split.test)?;
        let summary = aggregate(&reports)?;
        self.report("evaluate.json", "evaluate", &json!({ "summary": summary, "per_mcq": reports }))?;
        print!("{}", render_table(&summary));
        Ok(())
    }

    fn solve_rate(&self, source: &str) -> Result<(), CliError> {
        let split = self.split()?;
        let client = self.client()?;
        let prompts = PromptKit::builtin();
        let solver = LlmSolver {
            client: &client,
            model: self.cfg.models.solver.clone(),
        };
        let sources: Vec<String> = if source == "all" {
            std::iter::once("human".to_string())
                .chain(Approach::ALL.iter().map(|a| a.to_string()))
                .collect()
        } else {
            vec![source.to_string()]
        };
        let mut reports = BTreeMap::new();
        for src in sources {
            let items: Vec<(&Mcq, [Option<String>; 3])> = if src == "human" {
                split.test.iter().map(|m| (m, human_distractors(m))).collect()
            } else {
                let approach: Approach = src.parse().map_err(CliError::config)?;
                let results = self.results_for(approach)?;
                split
                    .test
                    .iter()
                    .map(|m| {
                        results
                            .iter()
                            .find(|r| r.mcq_id == m.id)
                            .map(|r| (m, generated_distractors(r)))
                            .ok_or_else(|| CliError::data(format!("no {approach} result for mcq {}", m.id)))
                    })
                    .collect::<Result<_, _>>()?
            };
            let report = solve_rate(&src, &items, &prompts, &solver, self.cfg.generation.seed, self.cfg.workers)?;
            println!(
                "{src:<6} solve rate {:.2}% ({}/{}, {} excluded)",
                report.rate * 100.0,
                report.correct,
                report.total,
                report.excluded.len()
            );
            reports.insert(src, report);
        }
        self.report("solve_rate.json", "solve-rate", &json!({ "sources": reports }))
    }

    fn pairs_build(&self, training_export: bool) -> Result<(), CliError> {
        let split = self.split()?;
        self.prepare_output()?;
        let mut counts = BTreeMap::new();
        for (name, part) in [("train", &split.train), ("test", &split.test)] {
            let ds = build_pair_dataset(part);
            write_jsonl(&self.out(&format!("pairs_{name}.jsonl")), &ds.pairs)?;
            counts.insert(
                name,
                json!({
                    "mcqs": part.len(),
                    "pairs": ds.pairs.len(),
                    "skipped_no_selection": ds.skipped_no_selection,
                    "skipped_ties": ds.skipped_ties,
                    "skipped_identical": ds.skipped_identical,
                }),
            );
            println!("{name:<5} {} pairs from {} MCQs", ds.pairs.len(), part.len());
            if training_export && name == "train" {
                let text = export_ranker_training(&ds.pairs, part, &PromptKit::builtin(), self.cfg.ranking.prompt_mode)?;
                write_file(&self.out("ranker_train.jsonl"), &text)?;
            }
        }
        self.report("pairs.json", "pairs-build", &json!({ "splits": counts }))
    }

    fn rank_score(&self, approaches: &[Approach], accuracy: bool) -> Result<(), CliError> {
        let split = self.split()?;
        let prompts = PromptKit::builtin();
        let client;
        let llm_ranker;
        let ranker: &dyn Ranker = match self.cfg.ranking.ranker {
            RankerKind::Llm => {
                client = self.client()?;
                let mut r = LlmRanker::new(&client, &prompts, self.cfg.models.ranker.clone());
                r.mode = self.cfg.ranking.prompt_mode;
                llm_ranker = r;
                &llm_ranker
            }
            RankerKind::Oracle => &SelectionOracle,
            RankerKind::First => &ConstantRanker(RankerVerdict::First),
            RankerKind::Random => &RandomRanker {
                seed: self.cfg.generation.seed,
            },
        };
        let mut scores = BTreeMap::new();
        for &a in approaches {
            let results = self.results_for(a)?;
            let report = preference_score(&split.test, &results, a, ranker, self.cfg.workers)?;
            println!("{a:<4} preference score {:.4} over {} MCQs", report.score, report.n);
            scores.insert(a, report);
        }
        let mut payload = json!({ "ranker": self.cfg.ranking.ranker, "scores": scores });
        if accuracy {
            let pairs = build_pair_dataset(&split.test).pairs;
            let acc = ranker_accuracy(&pairs, &split.test, ranker, self.cfg.ranking.margin)?;
            println!("ranker accuracy {:.2}% on {} pairs", acc.accuracy * 100.0, acc.evaluated);
            payload["accuracy"] = serde_json::to_value(acc).expect("serializes");
        }
        self.report("rank_score.json", "rank-score", &payload)
    }

    fn ft_export(&self, answers: bool) -> Result<(), CliError> {
        let split = self.split()?;
        let prompts = PromptKit::builtin();
        self.prepare_output()?;
        let text = export_ft_dataset(&split.train, &prompts, self.cfg.generation.prompt_mode)?;
        write_file(&self.out("ft_train.jsonl"), &text)?;
        let mut payload = json!({ "ft_records": text.lines().count() });
        if answers {
            let text = export_answer_dataset(&split.train, &prompts)?;
            write_file(&self.out("answer_train.jsonl"), &text)?;
            payload["answer_records"] = json!(text.lines().count());
        }
        println!("{payload}");
        self.report("ft_export.json", "ft-export", &payload)
    }

    fn humaneval_export(&self, approach: Approach, seed: u64, balance: bool) -> Result<(), CliError> {
        let split = self.split()?;
        let results = self.results_for(approach)?;
        let mut items = eval_items(&split.test, &results, approach)?;
        if balance {
            for it in &mut items {
                let n = it.generated.len().min(it.human.len());
                it.human.truncate(n);
                it.generated.truncate(n);
            }
        }
        let sheet = export_eval_sheet(&items, seed)?;
        self.prepare_output()?;
        write_file(&self.out("eval_sheet.csv"), &sheet.rater_csv())?;
        write_file(&self.out("eval_key.csv"), &sheet.key_csv())?;
        println!("{} rows for {} MCQs", sheet.rows.len(), items.len());
        self.report(
            "humaneval_export.json",
            "humaneval-export",
            &json!({ "approach": approach, "seed": seed, "rows": sheet.rows.len(), "mcqs": items.len() }),
        )
    }

    fn humaneval_analyze(&self, key: &Path, ratings: &Path, welch: bool) -> Result<(), CliError> {
        let open = |p: &Path| fs::File::open(p).map_err(|e| CliError::io(p, e));
        let records = read_ratings(open(key)?, open(ratings)?)?;
        let kind = if welch { TTestKind::Welch } else { TTestKind::Pooled };
        let report = analyze_ratings(&records, kind);
        for (name, a) in [("validity", &report.validity), ("plausibility", &report.plausibility)] {
            let fmt_opt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.3}"));
            println!(
                "{name:<13} qwk {}  mean llm {}  mean human {}  p {}",
                fmt_opt(a.qwk),
                fmt_opt(a.mean.get(&distractor_core::analysis::Origin::Llm).copied()),
                fmt_opt(a.mean.get(&distractor_core::analysis::Origin::Human).copied()),
                fmt_opt(a.t_test.map(|t| t.p)),
            );
        }
        self.report("agreement.json", "humaneval-analyze", &report)
    }

    fn cache(&self, action: &CacheAction) -> Result<(), CliError> {
        let dir = self
            .cfg
            .backend
            .cache_dir
            .as_ref()
            .ok_or_else(|| CliError::config("cache commands need backend.cache_dir or --cache-dir"))?;
        let cache = ResponseCache::open(dir)?;
        match action {
            CacheAction::Export { out, model } => {
                let selection = model.clone().map_or(ExportSelection::All, ExportSelection::Model);
                let text = cache.export(&selection)?;
                write_file(out, &text)?;
                println!("exported {} exchanges", text.lines().count());
            }
            CacheAction::Import { file } => {
                let text = fs::read_to_string(file).map_err(|e| CliError::io(file, e))?;
                let s = cache.import(&text)?;
                println!("imported {} new, {} already present", s.added, s.already_present);
            }
        }
        Ok(())
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("row serializes"));
        text.push('\n');
    }
    write_file(path, &text)
}
