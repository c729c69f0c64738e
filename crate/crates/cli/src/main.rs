use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use tcda::dag::{build_graph, export_dot, validate_dag, GraphVariant};
use tcda::dialogue::{decompose_threads, NullPolicy};
use tcda::drope::{decay_curve, format_decay_table, THETA_MAC, THETA_MIC};
use tcda::pipeline::knowledge::ExternalAdjacency;
use tcda::pipeline::model::{gradient_fixture, prepare_all, Example};
use tcda::pipeline::run::{blob_hash, load_dataset, predictions_jsonl, read_records, records_jsonl, write_run_dir};
use tcda::pipeline::train::{load_model, save_model};
use tcda::pipeline::{evaluate_model, gen_synthetic, run_ablation, Model, PipelineConfig, SyntheticSpec, Trainer, Variant, Vocab};

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "tcda", version, about = "Thread-constrained DAG model for dialogue sentiment quadruples")]
struct Cli {
    /// Where run artifacts and the manifest go. Defaults to `runs/<command>`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Precomputed syntactic/semantic adjacency per dialogue.
        #[arg(long)]
        adjacency: Option<PathBuf>,
    },
    /// Score a checkpoint on the dev split of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        adjacency: Option<PathBuf>,
    },
    /// Write predicted quadruples as JSON lines.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        adjacency: Option<PathBuf>,
    },
    /// Generate a synthetic corpus.
    GenSynth {
        /// TOML generator settings; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// A `.jsonl` file, or a directory when `--dev` is given.
        #[arg(long)]
        out: PathBuf,
        /// Put the last N dialogues in `dev.jsonl` and the rest in `train.jsonl`.
        #[arg(long)]
        dev: Option<usize>,
    },
    /// Build, validate and export the utterance graph of each dialogue.
    BuildDag {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        window: usize,
        #[arg(long, value_enum, default_value_t = VariantArg::Tc)]
        variant: VariantArg,
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on a two-utterance dialogue.
    CheckGrad {
        #[arg(long)]
        config: PathBuf,
        /// Check K random entries per parameter instead of all.
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Train each variant under each seed and print the comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Variant names: full, no-dag, no-rope, no-both, graph=V, layers=L, window=W.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        variants: Vec<Variant>,
        /// Adds a predefined sweep.
        #[arg(long, value_enum)]
        sweep: Vec<Sweep>,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        seeds: Vec<u64>,
        /// Dataset; the synthetic stress corpus is used when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        adjacency: Option<PathBuf>,
    },
    /// Positional correlation against distance for two rotary bases.
    DecayCurve {
        #[arg(long, default_value_t = THETA_MIC)]
        theta_mic: f64,
        #[arg(long, default_value_t = THETA_MAC)]
        theta_mac: f64,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 20)]
        max_distance: usize,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Tc,
    Standard,
    Reply,
}

impl From<VariantArg> for GraphVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Tc => GraphVariant::Tc,
            VariantArg::Standard => GraphVariant::Standard,
            VariantArg::Reply => GraphVariant::Reply,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    Components,
    Layers,
    Window,
    Graph,
}

impl Sweep {
    fn variants(self) -> Vec<Variant> {
        match self {
            Sweep::Components => Variant::COMPONENTS.to_vec(),
            Sweep::Layers => Variant::layer_sweep(),
            Sweep::Window => Variant::window_sweep(),
            Sweep::Graph => Variant::graph_sweep(),
        }
    }
}

/// Files collected for the run directory.
struct Run {
    dir: PathBuf,
    files: BTreeMap<String, Vec<u8>>,
    notes: BTreeMap<String, String>,
}

impl Run {
    fn new(dir: Option<PathBuf>, command: &str) -> Self {
        Run { dir: dir.unwrap_or_else(|| Path::new("runs").join(command)), files: BTreeMap::new(), notes: BTreeMap::new() }
    }

    fn file(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.insert(name.to_string(), bytes.into());
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.insert(key.to_string(), value.to_string());
    }

    /// Records an output written outside the run directory by path and hash.
    fn external(&mut self, key: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.note(key, path.display());
        self.note(&format!("{key}_hash"), blob_hash(&bytes));
        Ok(())
    }

    fn finish(self, cfg: &PipelineConfig) -> Result<()> {
        let m = write_run_dir(&self.dir, cfg, &self.files, self.notes)?;
        eprintln!("run directory {} (content {})", self.dir.display(), &m.content_hash[..12]);
        Ok(())
    }
}

fn adjacency(path: &Option<PathBuf>) -> Result<Option<ExternalAdjacency>> {
    path.as_deref().map(|p| ExternalAdjacency::load(p).with_context(|| format!("loading {}", p.display()))).transpose()
}

fn config(path: &Path) -> Result<PipelineConfig> {
    PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn train(run: &mut Run, cfg_path: &Path, data: &Path, out: &Path, adj: &Option<PathBuf>) -> Result<PipelineConfig> {
    let cfg = config(cfg_path)?;
    let adj = adjacency(adj)?;
    let ds = load_dataset(data, NullPolicy::Reject)?;
    let vocab = Vocab::build(ds.train.iter().map(|r| &r.dialogue));
    let tr = prepare_all(&ds.train, &vocab, &cfg, adj.as_ref())?;
    let dv = prepare_all(&ds.dev, &vocab, &cfg, adj.as_ref())?;
    eprintln!("{} train / {} dev dialogues, vocabulary {}", tr.len(), dv.len(), vocab.len());
    let mut trainer = Trainer::new(Model::new(&cfg, vocab)?, &tr, &dv)?;
    let report = trainer.fit(|l| eprintln!("epoch {:>4}  loss {:>10.4}  dev micro {:.4}  iden {:.4}", l.epoch, l.loss, l.dev_micro_f1, l.dev_ident_f1))?;
    save_model(&trainer.model, out)?;
    let (metrics, _) = evaluate_model(&trainer.model, &dv)?;
    eprintln!("stopped ({:?}); best epoch {} with dev micro F1 {:.4}", report.stop, report.best_epoch, report.best_f1);
    run.file("config.toml", cfg.to_toml());
    run.file("history.jsonl", report.history.iter().map(|h| serde_json::to_string(h).expect("log serializes") + "\n").collect::<String>());
    run.file("metrics.txt", metrics.to_kv());
    run.note("best_epoch", report.best_epoch);
    run.note("dropped_quads", ds.dropped_quads);
    run.external("checkpoint", out)?;
    Ok(cfg)
}

fn predict_all(model: &Model, examples: &[Example]) -> Result<String> {
    let docs = examples.iter().map(|ex| Ok((ex.doc_id().to_string(), model.predict(ex)?))).collect::<Result<Vec<_>>>()?;
    Ok(predictions_jsonl(&docs))
}

fn eval(run: &mut Run, ckpt: &Path, data: &Path, adj: &Option<PathBuf>) -> Result<PipelineConfig> {
    let (model, _) = load_model(ckpt)?;
    let ds = load_dataset(data, NullPolicy::Reject)?;
    let dv = prepare_all(&ds.dev, &model.vocab, &model.cfg, adjacency(adj)?.as_ref())?;
    let (metrics, _) = evaluate_model(&model, &dv)?;
    print!("{}", metrics.to_kv());
    run.file("metrics.txt", metrics.to_kv());
    run.file("predictions.jsonl", predict_all(&model, &dv)?);
    run.external("checkpoint", ckpt)?;
    Ok(model.cfg)
}

fn predict(run: &mut Run, ckpt: &Path, input: &Path, output: &Path, adj: &Option<PathBuf>) -> Result<PipelineConfig> {
    let (model, _) = load_model(ckpt)?;
    let records = read_records(input, NullPolicy::Permissive)?;
    let ex = prepare_all(&records, &model.vocab, &model.cfg, adjacency(adj)?.as_ref())?;
    let text = predict_all(&model, &ex)?;
    fs::write(output, &text).with_context(|| format!("writing {}", output.display()))?;
    run.file("predictions.jsonl", text);
    run.external("checkpoint", ckpt)?;
    Ok(model.cfg)
}

fn gen_synth(run: &mut Run, spec: &Option<PathBuf>, out: &Path, dev: Option<usize>) -> Result<()> {
    let spec: SyntheticSpec = match spec {
        Some(p) => toml::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => SyntheticSpec::default(),
    };
    let records = gen_synthetic(&spec)?;
    match dev {
        Some(n) => {
            if n >= records.len() {
                bail!("--dev {n} leaves no training dialogues out of {}", records.len());
            }
            let (tr, dv) = records.split_at(records.len() - n);
            fs::create_dir_all(out)?;
            fs::write(out.join("train.jsonl"), records_jsonl(tr))?;
            fs::write(out.join("dev.jsonl"), records_jsonl(dv))?;
            run.external("train", &out.join("train.jsonl"))?;
            run.external("dev", &out.join("dev.jsonl"))?;
        }
        None => {
            fs::write(out, records_jsonl(&records)).with_context(|| format!("writing {}", out.display()))?;
            run.external("corpus", out)?;
        }
    }
    run.file("spec.toml", toml::to_string(&spec)?);
    eprintln!("{} dialogues, {} quadruples", records.len(), records.iter().map(|r| r.quads.len()).sum::<usize>());
    Ok(())
}

fn build_dag(run: &mut Run, input: &Path, window: usize, variant: GraphVariant, dot: &Option<PathBuf>) -> Result<bool> {
    let records = read_records(input, NullPolicy::Permissive)?;
    let mut ok = true;
    let mut dots = String::new();
    let mut summary = String::new();
    for r in &records {
        let d = &r.dialogue;
        let td = decompose_threads(d);
        let g = build_graph(d, &td, window, variant)?;
        let report = validate_dag(&g, d, &td);
        summary += &format!("{}\tnodes {}\tedges {}\tviolations {}\n", d.doc_id, g.node_count(), g.edges().len(), report.violations.len());
        for v in &report.violations {
            summary += &format!("{}\t  {v}\n", d.doc_id);
        }
        ok &= report.is_valid();
        dots += &export_dot(&g, d);
    }
    print!("{summary}");
    if let Some(p) = dot {
        fs::write(p, &dots).with_context(|| format!("writing {}", p.display()))?;
        run.external("dot", p)?;
    }
    run.file("validation.txt", summary);
    run.note("valid", ok);
    Ok(ok)
}

fn check_grad(run: &mut Run, cfg_path: &Path, sample: Option<usize>) -> Result<(PipelineConfig, bool)> {
    let cfg = config(cfg_path)?;
    let rec = gradient_fixture();
    let vocab = Vocab::build([&rec.dialogue]);
    let mut model = Model::new(&cfg, vocab.clone())?;
    let ex = Example::prepare(rec, &vocab, &cfg, None)?;
    let r = model.grad_check(&ex, sample.map(|k| (k, cfg.seed)))?;
    let ok = r.max_rel_error <= GRAD_TOLERANCE;
    let text = format!(
        "checked {}\nmax_rel_error {:e}\nworst {}[{}]\nanalytic {:e}\nnumeric {:e}\nresult {}\n",
        r.checked,
        r.max_rel_error,
        r.worst_param,
        r.worst_index,
        r.analytic,
        r.numeric,
        if ok { "PASS" } else { "FAIL" }
    );
    print!("{text}");
    run.file("gradcheck.txt", text);
    Ok((cfg, ok))
}

struct AblateArgs<'a> {
    config: &'a Path,
    variants: &'a [Variant],
    sweep: &'a [Sweep],
    seeds: &'a [u64],
    data: &'a Option<PathBuf>,
    adjacency: &'a Option<PathBuf>,
}

fn ablate(run: &mut Run, a: AblateArgs) -> Result<PipelineConfig> {
    let cfg = config(a.config)?;
    let mut variants: Vec<Variant> = a.variants.to_vec();
    for s in a.sweep {
        variants.extend(s.variants());
    }
    if variants.is_empty() {
        variants = Variant::COMPONENTS.to_vec();
    }
    let mut seen = Vec::new();
    variants.retain(|v| {
        let fresh = !seen.contains(v);
        seen.push(*v);
        fresh
    });
    let seeds = if a.seeds.is_empty() { vec![cfg.seed] } else { a.seeds.to_vec() };
    let (train, dev) = match a.data {
        Some(p) => {
            let ds = load_dataset(p, NullPolicy::Reject)?;
            (ds.train, ds.dev)
        }
        None => {
            let mut all = gen_synthetic(&SyntheticSpec::stress(200, cfg.seed))?;
            let dev = all.split_off(160);
            (all, dev)
        }
    };
    let adj = adjacency(a.adjacency)?;
    let table = run_ablation(&cfg, &train, &dev, &variants, &seeds, adj.as_ref(), |r| {
        eprintln!("{:<12} seed {:>4}  best epoch {:>4}  micro {:.4}", r.variant.to_string(), r.seed, r.best_epoch, r.metrics.micro.f1)
    })?;
    print!("{}", table.format());
    run.file("table.txt", table.format());
    run.file("runs.txt", table.format_runs());
    run.file("ablation.json", serde_json::to_string_pretty(&table)? + "\n");
    run.file("config.toml", cfg.to_toml());
    Ok(cfg)
}

fn decay(run: &mut Run, theta_mic: f64, theta_mac: f64, width: usize, max_distance: usize, samples: usize, out: &Option<PathBuf>) -> Result<PipelineConfig> {
    let cfg = PipelineConfig { theta_mic, theta_mac, ..PipelineConfig::default() };
    let rows = decay_curve(theta_mic, theta_mac, width, max_distance, samples, cfg.seed)?;
    let text = format_decay_table(&rows);
    print!("{text}");
    if let Some(p) = out {
        fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
        run.external("table", p)?;
    }
    run.file("decay.tsv", text);
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns whether the command's check passed.
fn dispatch(cli: Cli) -> Result<bool> {
    let name = match &cli.command {
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Predict { .. } => "predict",
        Command::GenSynth { .. } => "gen-synth",
        Command::BuildDag { .. } => "build-dag",
        Command::CheckGrad { .. } => "check-grad",
        Command::Ablate { .. } => "ablate",
        Command::DecayCurve { .. } => "decay-curve",
    };
    let mut run = Run::new(cli.run_dir, name);
    let (cfg, ok) = match &cli.command {
        Command::Train { config, data, out, adjacency } => (train(&mut run, config, data, out, adjacency)?, true),
        Command::Eval { ckpt, data, adjacency } => (eval(&mut run, ckpt, data, adjacency)?, true),
        Command::Predict { ckpt, input, output, adjacency } => (predict(&mut run, ckpt, input, output, adjacency)?, true),
        Command::GenSynth { spec, out, dev } => {
            gen_synth(&mut run, spec, out, *dev)?;
            (PipelineConfig::default(), true)
        }
        Command::BuildDag { input, window, variant, dot } => {
            let cfg = PipelineConfig { window: *window, graph_variant: (*variant).into(), ..PipelineConfig::default() };
            cfg.validate()?;
            let ok = build_dag(&mut run, input, *window, cfg.graph_variant, dot)?;
            (cfg, ok)
        }
        Command::CheckGrad { config, sample } => check_grad(&mut run, config, *sample)?,
        Command::Ablate { config, variants, sweep, seeds, data, adjacency } => {
            (ablate(&mut run, AblateArgs { config, variants, sweep, seeds, data, adjacency })?, true)
        }
        Command::DecayCurve { theta_mic, theta_mac, width, max_distance, samples, out } => {
            (decay(&mut run, *theta_mic, *theta_mac, *width, *max_distance, *samples, out)?, true)
        }
    };
    run.finish(&cfg)?;
    Ok(ok)
}
