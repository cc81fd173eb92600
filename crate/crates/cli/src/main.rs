use std::path::{Path, PathBuf};
use std::process::ExitCode;

use birads_core::config::RunConfig;
use birads_core::io::{
    load_external_samples, load_model, save_model, write_augmented, write_bytes,
    write_external_samples, write_lesions, IoError,
};
use birads_core::pipeline::{
    attach_external, evaluate_scored, load_cohort, predict_test_split, run_pipeline,
    train_on_cohort, write_reports, PipelineError, AUGMENTED_FILE, BUNDLE_FILE, SAMPLES_FILE,
};
use birads_core::uncertainty::{assign_birads, MapperConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "birads",
    version,
    about = "BI-RADS scoring from Monte-Carlo-dropout predictive entropy"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: resample, train, predict, map, evaluate, report.
    Run(Common),
    /// Write a synthetic cohort (with exact posteriors) to <out>/cohort.csv.
    Synth(Common),
    /// Train on the train split and save the model to --model.
    Train(Common),
    /// Monte-Carlo predictions for the test split, written to <out>/samples.csv.
    Predict(Common),
    /// Entropy and BI-RADS category for every case of a samples file.
    Map(Common),
    /// Score a samples file against lesion metadata and write reports.
    Evaluate(Common),
    /// Print the tables of a written bundle.
    Report {
        /// Bundle file; defaults to <out>/bundle.json.
        bundle: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stochastic forward passes per case.
    #[arg(long)]
    passes: Option<usize>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Hidden widths, comma-separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long, overrides_with = "no_smote")]
    smote: bool,
    #[arg(long, overrides_with = "smote")]
    no_smote: bool,
    #[arg(long)]
    smote_k: Option<usize>,
    /// Probability edge of the B2 band.
    #[arg(long)]
    b2_epsilon: Option<f64>,
    #[arg(long)]
    lesions: Option<PathBuf>,
    /// External per-pass probabilities (case_id, pass_index, p_benign, p_malignant).
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Synthetic cohort: "separable" or "overlapping".
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    synth_cases: Option<usize>,
    /// Abort on the first malformed lesion row.
    #[arg(long)]
    strict: bool,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.validation {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => {
                RunConfig::from_file(p).map_err(|e| Failure::from(PipelineError::from(e)))?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = &self.$flag { cfg.$field = v.clone(); })*
            };
        }
        set!(seed => seed, passes => passes, dropout_rate => dropout_rate, epochs => epochs,
             lr => learning_rate, batch_size => batch_size, hidden => hidden,
             smote_k => smote_k, out => out, synth_cases => synth_cases);
        if self.b2_epsilon.is_some() {
            cfg.b2_epsilon = self.b2_epsilon;
        }
        for (flag, field) in [
            (&self.lesions, &mut cfg.lesions),
            (&self.samples, &mut cfg.samples),
            (&self.model, &mut cfg.model),
        ] {
            if flag.is_some() {
                *field = flag.clone();
            }
        }
        if self.preset.is_some() {
            cfg.preset = self.preset.clone();
        }
        if self.smote {
            cfg.smote = true;
        }
        if self.no_smote {
            cfg.smote = false;
        }
        if self.strict {
            cfg.strict = true;
        }
        cfg.validate()
            .map_err(|e| Failure::from(PipelineError::from(e)))?;
        Ok(cfg)
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    write_bytes(path, bytes).map_err(Failure::from)
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf, Failure> {
    v.as_ref()
        .ok_or_else(|| Failure::Validation(format!("{flag} is required for this command")))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(c) => {
            let cfg = c.resolve()?;
            let out = run_pipeline(&cfg)?;
            let b = &out.bundle;
            println!(
                "{} test cases, label accuracy {:.2}%; reports in {}",
                b.n_test,
                b.test_accuracy,
                cfg.out.display()
            );
            if let Some(a) = &b.agreement {
                println!(
                    "oracle agreement: coarse {:.2}%, band {:.2}%",
                    a.coarse_agreement, a.band_agreement
                );
            }
        }
        Command::Synth(c) => {
            let mut cfg = c.resolve()?;
            cfg.preset.get_or_insert_with(|| "separable".into());
            let cohort = load_cohort(&cfg)?;
            let mut buf = Vec::new();
            write_lesions(&mut buf, &cohort.records, cohort.posteriors.as_deref())?;
            let path = cfg.out.join("cohort.csv");
            write(&path, &buf)?;
            println!(
                "{} cases written to {}",
                cohort.records.len(),
                path.display()
            );
        }
        Command::Train(c) => {
            let cfg = c.resolve()?;
            let model_path = require(&cfg.model, "--model")?;
            let cohort = load_cohort(&cfg)?;
            let (model, augmented, summary) = train_on_cohort(&cfg, &cohort)?;
            save_model(&model, model_path)?;
            if cfg.smote {
                let mut buf = Vec::new();
                write_augmented(&mut buf, &augmented, &model.layout)?;
                write(&cfg.out.join(AUGMENTED_FILE), &buf)?;
            }
            println!(
                "trained on {} records ({} synthetic), final loss {:.6}; model saved to {}",
                summary.n_train + summary.n_synthetic,
                summary.n_synthetic,
                summary.final_loss,
                model_path.display()
            );
        }
        Command::Predict(c) => {
            let cfg = c.resolve()?;
            let model = load_model::<f64>(require(&cfg.model, "--model")?)?;
            let cohort = load_cohort(&cfg)?;
            let scored = predict_test_split(&cfg, &model, &cohort)?;
            let mut buf = Vec::new();
            write_external_samples(
                &mut buf,
                scored
                    .iter()
                    .map(|(i, s)| (cohort.records[*i].case_id.as_str(), s)),
            )?;
            let path = cfg.out.join(SAMPLES_FILE);
            write(&path, &buf)?;
            println!(
                "{} cases x {} passes written to {}",
                scored.len(),
                cfg.passes,
                path.display()
            );
        }
        Command::Map(c) => {
            let cfg = c.resolve()?;
            let samples = load_external_samples(require(&cfg.samples, "--samples")?)?;
            let passes = samples.values().next().map_or(cfg.passes, |s| s.passes());
            let mapper = match cfg.b2_epsilon {
                Some(eps) => {
                    MapperConfig::new(eps).map_err(|e| Failure::Validation(e.to_string()))?
                }
                None => MapperConfig::for_passes(passes),
            };
            let mut text = String::from("case_id,p_benign,p_malignant,entropy,birads\n");
            for (id, s) in &samples {
                let d = s.mean().map_err(|e| Failure::Validation(e.to_string()))?;
                let (h, b) =
                    assign_birads(&d, &mapper).map_err(|e| Failure::Validation(e.to_string()))?;
                text += &format!("{id},{},{},{h},{b}\n", d.p_benign(), d.p_malignant());
            }
            let path = cfg.out.join("mapped.csv");
            write(&path, text.as_bytes())?;
            println!("{} cases mapped to {}", samples.len(), path.display());
        }
        Command::Evaluate(c) => {
            let cfg = c.resolve()?;
            let samples = load_external_samples(require(&cfg.samples, "--samples")?)?;
            let cohort = load_cohort(&cfg)?;
            let scored = attach_external(&cohort, samples)?;
            let bundle = evaluate_scored(&cfg, &cohort, &scored, None)?;
            write_reports(&bundle, &cfg.out)?;
            println!(
                "{} cases evaluated; reports in {}",
                bundle.n_test,
                cfg.out.display()
            );
        }
        Command::Report { bundle, out } => {
            let path = bundle.unwrap_or_else(|| out.join(BUNDLE_FILE));
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            let v: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
            print!("{}", render(&v));
        }
    }
    Ok(())
}

fn num(v: &serde_json::Value) -> String {
    v.as_f64().map_or_else(|| "-".into(), |x| format!("{x:.2}"))
}

fn render(b: &serde_json::Value) -> String {
    let mut s = String::new();
    let st = &b["settings"];
    s += &format!(
        "source {}  seed {}  passes {}  b2 epsilon {}\n",
        b["source"].as_str().unwrap_or("?"),
        st["seed"],
        st["passes"],
        st["b2_epsilon"]
    );
    let th = &st["thresholds"];
    s += &format!(
        "entropy thresholds  B2 {}  B3 {}  B4a {}  B5 {}\n",
        th["h_b2"], th["h_b3"], th["h_b4a"], th["h_b5"]
    );
    s += &format!(
        "test cases {}  label accuracy {}%\n\n",
        b["n_test"],
        num(&b["test_accuracy"])
    );
    s += &format!(
        "{:<8}{:<13}{:<11}{:>10}{:>9}{:>9}{:>10}\n",
        "stratum", "assigner", "class", "precision", "recall", "f1", "accuracy"
    );
    for pair in b["strata"].as_array().into_iter().flatten() {
        for who in ["radiologist", "model"] {
            let r = &pair[who];
            let stratum = r["stratum"].as_str().unwrap_or("?");
            match r["status"].as_str() {
                Some("evaluated") => {
                    for class in ["benign", "malignant", "macro"] {
                        let row = &r[class];
                        s += &format!(
                            "{:<8}{:<13}{:<11}{:>10}{:>9}{:>9}{:>10}\n",
                            stratum,
                            who,
                            class,
                            num(&row["precision"]),
                            num(&row["recall"]),
                            num(&row["f1"]),
                            if class == "benign" {
                                num(&r["accuracy"])
                            } else {
                                String::new()
                            }
                        );
                    }
                }
                status => {
                    s += &format!(
                        "{:<8}{:<13}{} (n = {})\n",
                        stratum,
                        who,
                        status.unwrap_or("?").replace('_', " "),
                        r["n"]
                    );
                }
            }
        }
    }
    let c = &b["confusion"];
    s += "\nconfusion (rows radiologist, columns model)\n       ";
    for col in c["cols"].as_array().into_iter().flatten() {
        s += &format!("{:>6}", col.as_str().unwrap_or("?"));
    }
    s.push('\n');
    let rows = c["rows"].as_array().cloned().unwrap_or_default();
    for (r, counts) in rows
        .iter()
        .zip(c["counts"].as_array().into_iter().flatten())
    {
        s += &format!("{:<7}", r.as_str().unwrap_or("?"));
        for v in counts.as_array().into_iter().flatten() {
            s += &format!("{v:>6}");
        }
        s.push('\n');
    }
    if let Some(a) = b.get("agreement") {
        s += &format!(
            "\noracle agreement  coarse {}%  band {}%  consistency model {}% oracle {}%\n",
            num(&a["coarse_agreement"]),
            num(&a["band_agreement"]),
            num(&a["model_consistency"]),
            num(&a["oracle_consistency"])
        );
    }
    s
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
