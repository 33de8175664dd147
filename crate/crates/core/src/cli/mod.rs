//! Command-line front end: `gen`, `split`, `train`, `eval`, `export-memory`.

mod config;

pub use config::{RunConfig, DEFAULTS};

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::data::{gen_synthetic, load_dataset, mcfs_split, save_dataset, Dataset, Layout};
use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::model::{ModelParams, Setting};
use crate::ndgrad::checkpoint;
use crate::seed;
use crate::training::{
    evaluate_episodes, evaluate_supervised, finetune_supervised, pretrain_supervised, seed_memory, train_meta,
    LogLine, MetaClassifier,
};

pub const CONFIG_FILE: &str = "config.txt";
pub const EVAL_CONFIG_FILE: &str = "eval_config.txt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const MEMORY_FILE: &str = "memory.ckpt";
pub const LOG_FILE: &str = "train.log";
pub const TRAIN_RESULT_FILE: &str = "train_result.json";
pub const RESULT_FILE: &str = "result.json";

#[derive(Debug, Parser)]
#[command(name = "hikfs", version, about = "Hierarchical memory-augmented few-shot classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat key=value config file, applied over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Any config key, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Suppress progress output on stderr.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic hierarchical dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        coarse: Option<usize>,
        #[arg(long)]
        fine_per_coarse: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        coarse_sep: Option<f64>,
        #[arg(long)]
        fine_sep: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        jitter: Option<usize>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Split a dataset into train/val/test files plus a manifest.
    Split {
        #[command(flatten)]
        common: Common,
        data: PathBuf,
        /// meta or supervised.
        #[arg(long)]
        mode: Option<String>,
        /// train,val,test fractions.
        #[arg(long)]
        fractions: Option<String>,
        #[arg(long)]
        coarse_in_every_split: bool,
        /// Directory for the outputs; defaults to the data file's directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train a model (supervised: pretrain + fine-tune; meta: episodic).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory for config echo, log and checkpoints.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        setting: Option<String>,
        /// Ablation switch, repeatable: hierarchy|attention|mlp|knn=on|off.
        #[arg(long, value_name = "SWITCH=on|off")]
        ablate: Vec<String>,
        /// mem1, mem2 or mem3.
        #[arg(long)]
        memory: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        #[arg(long)]
        finetune_epochs: Option<usize>,
        #[arg(long)]
        way: Option<usize>,
        #[arg(long)]
        shot: Option<usize>,
        #[arg(long)]
        query: Option<usize>,
    },
    /// Evaluate a trained run.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run directory produced by `train`.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Evaluation data file.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        way: Option<usize>,
        #[arg(long)]
        shot: Option<usize>,
        #[arg(long)]
        query: Option<usize>,
        /// Parallel episode workers; results do not depend on this.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Where to write the eval config echo and result; defaults to the run directory.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Dump memory slots and sampled embeddings as CSV.
    ExportMemory {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: PathBuf,
        /// Data to sample embeddings from; defaults to the run's training data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Embeddings sampled per class.
        #[arg(long, default_value_t = 5)]
        samples: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn opt<T: ToString>(key: &'static str, v: &Option<T>) -> Option<(&'static str, String)> {
    v.as_ref().map(|v| (key, v.to_string()))
}

fn path_opt(key: &'static str, v: &Option<PathBuf>) -> Option<(&'static str, String)> {
    v.as_ref().map(|p| (key, p.display().to_string()))
}

/// defaults < `base` file < `--config` < `--set` < named flags.
fn resolve(common: &Common, base: Option<&Path>, flags: &[Option<(&'static str, String)>]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(b) = base {
        cfg.apply_file(b)?;
    }
    if let Some(c) = &common.config {
        cfg.apply_file(c)?;
    }
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    for (k, v) in flags.iter().flatten() {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn required<'a>(cfg: &'a RunConfig, key: &str, what: &str) -> Result<&'a str> {
    match cfg.get(key) {
        "" => Err(Error::Config(format!("missing {what} (`{key}`)"))),
        v => Ok(v),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn layout_text(l: Layout) -> String {
    match l {
        Layout::Features(d) => format!("dims={d}"),
        Layout::Image(s) => format!("image={s}x{s}"),
    }
}

/// Loads `key`'s dataset, collapsing the hierarchy when it is switched off.
fn load_for_run(cfg: &RunConfig, key: &str) -> Result<Dataset> {
    let path = required(cfg, key, "data file")?;
    let ds = load_dataset(Path::new(path))?;
    ds.validate()?;
    Ok(if cfg.flag("hierarchy")? { ds } else { ds.collapse_hierarchy() })
}

fn derived(ds: &Dataset) -> Vec<(String, String)> {
    vec![
        ("num_fine".into(), ds.hierarchy.num_fine().to_string()),
        ("num_coarse".into(), ds.hierarchy.num_coarse().to_string()),
        ("input".into(), layout_text(ds.layout)),
    ]
}

#[derive(Serialize)]
struct TrainRecord<'a> {
    setting: &'a str,
    final_loss: f64,
    final_acc: f64,
    seed: u64,
}

#[derive(Serialize)]
struct EpisodeRecord {
    mean_acc: f64,
    ci95: f64,
    episodes: usize,
    way: usize,
    shot: usize,
    seed: u64,
}

#[derive(Serialize)]
struct SupervisedRecord {
    fine_acc: f64,
    coarse_acc: f64,
    n: usize,
    seed: u64,
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain record serializes")
}

fn cmd_gen(cfg: &RunConfig, output: &Path) -> Result<()> {
    let ds = gen_synthetic(&cfg.gen_spec()?)?;
    save_dataset(&ds, output)
}

fn cmd_split(cfg: &RunConfig, data: &Path, out_dir: Option<&Path>, quiet: bool) -> Result<()> {
    let spec = cfg.split_spec()?;
    let ds = load_dataset(data)?;
    ds.validate()?;
    let (tr, va, te, manifest) = mcfs_split(&ds, &spec)?;
    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| data.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let stem = data.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    for (part, name) in [(&tr, "train"), (&va, "val"), (&te, "test")] {
        let p = dir.join(format!("{stem}.{name}.txt"));
        save_dataset(part, &p)?;
        if !quiet {
            eprintln!("{name}: {} items, {} fine classes -> {}", part.len(), part.present_classes().len(), p.display());
        }
    }
    write_file(&dir.join(format!("{stem}.manifest.txt")), &manifest.render())
}

fn cmd_train(cfg: &RunConfig, quiet: bool) -> Result<()> {
    cfg.check()?;
    let out = PathBuf::from(required(cfg, "out", "output directory")?);
    required(cfg, "data", "data file")?;
    let ds = load_for_run(cfg, "data")?;
    ds.ensure_trainable()?;
    let tc = cfg.train_config()?;
    let mc = cfg.model_config(ds.hierarchy.num_fine(), ds.hierarchy.num_coarse(), ds.layout)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_file(&out.join(CONFIG_FILE), &cfg.render(&derived(&ds)))?;

    let log_path = out.join(LOG_FILE);
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut last: Option<LogLine> = None;
    let mut io_err = None;
    let mut log = |l: &LogLine| {
        if let Err(e) = writeln!(log_file, "{l}") {
            io_err.get_or_insert(e);
        }
        if !quiet {
            eprintln!("{l}");
        }
        last = Some(*l);
    };
    let setting = mc.setting;
    match setting {
        Setting::Supervised => {
            let pre = pretrain_supervised(&tc, mc, &ds, &mut log)?;
            let bank = seed_memory(&tc, &pre, &ds)?;
            let (model, bank) = finetune_supervised(&tc, pre, bank, &ds, &mut log)?;
            checkpoint::save(&model.params, &out.join(MODEL_FILE))?;
            checkpoint::save(&bank.to_params(), &out.join(MEMORY_FILE))?;
        }
        Setting::Meta => {
            let model = train_meta(&tc, mc, &ds, &mut log)?;
            checkpoint::save(&model.params, &out.join(MODEL_FILE))?;
        }
    }
    if let Some(e) = io_err {
        return Err(Error::io(&log_path, e));
    }
    let last = last.unwrap_or(LogLine {
        iter: 0,
        loss: f64::NAN,
        acc: f64::NAN,
        lr: 0.0,
    });
    let rec = TrainRecord {
        setting: setting.name(),
        final_loss: last.loss,
        final_acc: last.acc,
        seed: tc.seed,
    };
    write_file(&out.join(TRAIN_RESULT_FILE), &(to_json(&rec) + "\n"))
}

/// Loads a run's model, checking every tensor against a fresh init of the config.
fn load_model(cfg: &RunConfig, run: &Path, ds: &Dataset) -> Result<ModelParams> {
    let mc = cfg.model_config(ds.hierarchy.num_fine(), ds.hierarchy.num_coarse(), ds.layout)?;
    let reference = ModelParams::init(mc.clone(), &mut seed::rng(0))?;
    let params = checkpoint::load(&run.join(MODEL_FILE))?;
    for (name, t) in reference.params.iter() {
        let got = params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{name}`")))?;
        if got.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {:?}, the config expects {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    Ok(ModelParams { config: mc, params })
}

fn eval_config(common: &Common, flags: &[Option<(&'static str, String)>]) -> Result<(RunConfig, PathBuf)> {
    let top = resolve(common, None, flags)?;
    let run = PathBuf::from(required(&top, "run", "run directory")?);
    let cfg = resolve(common, Some(&run.join(CONFIG_FILE)), flags)?;
    Ok((cfg, run))
}

fn cmd_eval(cfg: &RunConfig, run: &Path, workers: usize, out: Option<&Path>) -> Result<String> {
    cfg.check()?;
    let ds = load_for_run(cfg, "eval_data")?;
    let model = load_model(cfg, run, &ds)?;
    let seed_: u64 = cfg.parse("seed")?;
    let (line, table) = match model.config.setting {
        Setting::Meta => {
            let shape = cfg.eval_shape()?;
            let episodes: usize = cfg.parse("episodes")?;
            let clf = MetaClassifier {
                model: &model,
                mode: cfg.memory_mode()?,
            };
            let r = evaluate_episodes(&clf, &ds, shape, episodes, seed_, workers)?;
            let rec = EpisodeRecord {
                mean_acc: r.mean_acc,
                ci95: r.ci95,
                episodes,
                way: shape.way,
                shot: shape.shot,
                seed: seed_,
            };
            let mut t = String::new();
            writeln!(t, "{:<10} {:>8} {:>6} {:>6} {:>10} {:>10}", "setting", "episodes", "way", "shot", "mean_acc", "ci95").unwrap();
            writeln!(t, "{:<10} {:>8} {:>6} {:>6} {:>10.4} {:>10.4}", "meta", episodes, shape.way, shape.shot, r.mean_acc, r.ci95).unwrap();
            (to_json(&rec), t)
        }
        Setting::Supervised => {
            let bank = MemoryBank::from_params(&checkpoint::load(&run.join(MEMORY_FILE))?)?;
            let r = evaluate_supervised(&model, Some(&bank), &ds)?;
            let rec = SupervisedRecord {
                fine_acc: r.fine_acc,
                coarse_acc: r.coarse_acc,
                n: r.n,
                seed: seed_,
            };
            let mut t = String::new();
            writeln!(t, "{:<10} {:>8} {:>10} {:>10}", "setting", "n", "fine_acc", "coarse_acc").unwrap();
            writeln!(t, "{:<10} {:>8} {:>10.4} {:>10.4}", "supervised", r.n, r.fine_acc, r.coarse_acc).unwrap();
            (to_json(&rec), t)
        }
    };
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| run.to_path_buf());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut echo = cfg.clone();
    echo.set("run", &run.display().to_string())?;
    write_file(&dir.join(EVAL_CONFIG_FILE), &echo.render(&derived(&ds)))?;
    write_file(&dir.join(RESULT_FILE), &format!("{line}\n"))?;
    Ok(format!("{line}\n{table}"))
}

fn cmd_export(cfg: &RunConfig, run: &Path, data: Option<&Path>, samples: usize, output: &Path) -> Result<()> {
    if cfg.setting()? != Setting::Supervised {
        return Err(Error::Config("only supervised runs keep a memory bank".into()));
    }
    let mut cfg = cfg.clone();
    if let Some(d) = data {
        cfg.set("data", &d.display().to_string())?;
    }
    let ds = load_for_run(&cfg, "data")?;
    let model = load_model(&cfg, run, &ds)?;
    let bank = MemoryBank::from_params(&checkpoint::load(&run.join(MEMORY_FILE))?)?;
    let mut csv = String::from("class,kind,utility");
    for i in 1..=bank.dim() {
        write!(csv, ",v{i}").unwrap();
    }
    csv.push('\n');
    let row = |csv: &mut String, class: &str, kind: &str, utility: Option<f64>, v: &[f64]| {
        csv.push_str(class);
        csv.push(',');
        csv.push_str(kind);
        csv.push(',');
        if let Some(u) = utility {
            write!(csv, "{u}").unwrap();
        }
        for x in v {
            write!(csv, ",{x}").unwrap();
        }
        csv.push('\n');
    };
    for j in 0..bank.classes() {
        let name = ds.fine_names.get(j).map_or("?", String::as_str);
        for k in 0..bank.occupancy(j) {
            row(&mut csv, name, "mem", Some(bank.utility(j, k)), bank.slot(j, k));
        }
    }
    if !bank.is_empty() {
        let mut rng = seed::stream(cfg.parse("seed")?, "export", 0);
        for (y, mut idx) in ds.by_class().into_iter().enumerate() {
            idx.shuffle(&mut rng);
            idx.truncate(samples);
            if idx.is_empty() {
                continue;
            }
            let f = model.encode_tensor(&ds.batch(&idx))?;
            for r in 0..idx.len() {
                row(&mut csv, &ds.fine_names[y], "img", None, f.row(r));
            }
        }
    }
    write_file(output, &csv)
}

/// Runs one parsed command. Returns what should go to stdout.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Gen {
            common,
            coarse,
            fine_per_coarse,
            dim,
            per_class,
            coarse_sep,
            fine_sep,
            noise,
            jitter,
            output,
        } => {
            let cfg = resolve(
                &common,
                None,
                &[
                    opt("coarse", &coarse),
                    opt("fine_per_coarse", &fine_per_coarse),
                    opt("dim", &dim),
                    opt("per_class", &per_class),
                    opt("coarse_sep", &coarse_sep),
                    opt("fine_sep", &fine_sep),
                    opt("noise", &noise),
                    opt("jitter", &jitter),
                ],
            )?;
            cmd_gen(&cfg, &output)?;
            Ok(String::new())
        }
        Command::Split {
            common,
            data,
            mode,
            fractions,
            coarse_in_every_split,
            out_dir,
        } => {
            let every = coarse_in_every_split.then(|| "true".to_string());
            let cfg = resolve(
                &common,
                None,
                &[opt("mode", &mode), opt("fractions", &fractions), opt("coarse_in_every_split", &every)],
            )?;
            cmd_split(&cfg, &data, out_dir.as_deref(), common.quiet)?;
            Ok(String::new())
        }
        Command::Train {
            common,
            data,
            out,
            setting,
            ablate,
            memory,
            iterations,
            pretrain_epochs,
            finetune_epochs,
            way,
            shot,
            query,
        } => {
            let mut cfg = resolve(
                &common,
                None,
                &[
                    path_opt("data", &data),
                    path_opt("out", &out),
                    opt("setting", &setting),
                    opt("memory", &memory),
                    opt("iterations", &iterations),
                    opt("pretrain_epochs", &pretrain_epochs),
                    opt("finetune_epochs", &finetune_epochs),
                    opt("way", &way),
                    opt("shot", &shot),
                    opt("query", &query),
                ],
            )?;
            for a in &ablate {
                let (k, _) = a
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("expected switch=on|off, got `{a}`")))?;
                if !matches!(k, "hierarchy" | "attention" | "mlp" | "knn") {
                    return Err(Error::Config(format!("unknown ablation switch `{k}`")));
                }
                cfg.set_pair(a)?;
            }
            cmd_train(&cfg, common.quiet)?;
            Ok(String::new())
        }
        Command::Eval {
            common,
            run,
            data,
            episodes,
            way,
            shot,
            query,
            workers,
            out,
        } => {
            let flags = [
                path_opt("run", &run),
                path_opt("eval_data", &data),
                opt("episodes", &episodes),
                opt("eval_way", &way),
                opt("eval_shot", &shot),
                opt("eval_query", &query),
            ];
            let (cfg, run) = eval_config(&common, &flags)?;
            let text = cmd_eval(&cfg, &run, workers, out.as_deref())?;
            if common.quiet {
                Ok(text.lines().next().map(|l| format!("{l}\n")).unwrap_or_default())
            } else {
                Ok(text)
            }
        }
        Command::ExportMemory {
            common,
            run,
            data,
            samples,
            output,
        } => {
            let cfg = resolve(&common, Some(&run.join(CONFIG_FILE)), &[])?;
            cmd_export(&cfg, &run, data.as_deref(), samples, &output)?;
            Ok(String::new())
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
