//! Command-line entry points for synthetic data generation, the three
//! search steps, full pipeline runs, evaluation and manifest
//! inspection. All randomness flows from the config seed.

use clap::{Args, Parser, Subcommand};
use recnas::config::{parse_config, RunConfig};
use recnas::interactions::interactions_to_names;
use recnas::manifest::{
    config_hash, load_manifest, save_manifest, ArtifactManifest, MANIFEST_FILE,
};
use recnas::schema::{save_dataset, Task};
use recnas::search::{
    build_eval_set, eval_retrieval, eval_stage3_auc, import_model_state, run_pipeline,
    PipelineData, Stage1Model, Stage3Config, Stage3Model, StepsEnabled,
};
use recnas::synth::{
    generate_markov, generate_planted_ctr, leave_one_out_split, sequences_to_instances,
    SyntheticSpec,
};
use recnas::RecError;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "recnas", version, about = "Architecture search for recommender models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset from a generator spec
    GenData {
        /// JSON generator spec
        #[arg(long)]
        spec: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Run only the behavior-block search (step 1)
    SearchBlocks(RunArgs),
    /// Run only the feature-interaction search (step 2)
    SearchInteractions(RunArgs),
    /// Run only the aggregation-MLP search (step 3)
    SearchMlp(RunArgs),
    /// Run the full three-step pipeline
    RunPipeline(RunArgs),
    /// Re-evaluate a finished run's final model on its test data
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding the run manifest and checkpoints
        #[arg(long)]
        run: PathBuf,
    },
    /// Print a run manifest's winners in table vocabulary
    Inspect {
        /// Manifest directory (or the manifest file itself)
        path: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn dispatch(cmd: Cmd) -> Result<(), RecError> {
    match cmd {
        Cmd::GenData { spec, out } => gen_data(&spec, &out),
        Cmd::SearchBlocks(a) => {
            run(a, StepsEnabled { blocks: true, interactions: false, mlp: false })
        }
        Cmd::SearchInteractions(a) => {
            run(a, StepsEnabled { blocks: false, interactions: true, mlp: false })
        }
        Cmd::SearchMlp(a) => {
            run(a, StepsEnabled { blocks: false, interactions: false, mlp: true })
        }
        Cmd::RunPipeline(a) => run(a, StepsEnabled::default()),
        Cmd::Evaluate { config, run } => evaluate(&config, &run),
        Cmd::Inspect { path } => inspect(&path),
    }
}

fn gen_data(spec_path: &Path, out: &Path) -> Result<(), RecError> {
    let text = std::fs::read_to_string(spec_path)?;
    let spec: SyntheticSpec = serde_json::from_str(&text)?;
    std::fs::create_dir_all(out)?;
    match &spec {
        SyntheticSpec::PlantedInteractionCtr {
            rows,
            fields,
            cardinality,
            pair,
            beta,
            seed,
        } => {
            let (schema, data) = generate_planted_ctr(*rows, *fields, *cardinality, *pair, *beta, *seed);
            schema.save(&out.join("schema.json"))?;
            let n = data.len();
            let (a, b) = (n * 8 / 10, n * 9 / 10);
            save_dataset(&out.join("train.ndjson"), &schema, &data[..a])?;
            save_dataset(&out.join("val.ndjson"), &schema, &data[a..b])?;
            save_dataset(&out.join("test.ndjson"), &schema, &data[b..])?;
            println!("wrote {} train / {} val / {} test rows", a, b - a, n - b);
        }
        SyntheticSpec::MarkovSeq { users, items, seq_len, noise, seed } => {
            let (schema, seqs) = generate_markov(*users, *items, *seq_len, *noise, *seed);
            schema.save(&out.join("schema.json"))?;
            let rows = sequences_to_instances(&seqs);
            save_dataset(&out.join("sequences.ndjson"), &schema, &rows)?;
            println!("wrote {} user sequences", rows.len());
        }
    }
    std::fs::write(out.join("generator_spec.json"), text)?;
    Ok(())
}

fn run(args: RunArgs, requested: StepsEnabled) -> Result<(), RecError> {
    let mut cfg = parse_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.pipeline.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out_dir = Some(out);
    }
    let schema = cfg.load_schema()?;
    cfg.validate(&schema)?;
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| RecError::Config("out_dir is required".into()))?;
    let data = cfg.load_data(&schema)?;
    let allowed = cfg.effective_steps(&schema);
    let steps = StepsEnabled {
        blocks: requested.blocks && allowed.blocks,
        interactions: requested.interactions && allowed.interactions,
        mlp: requested.mlp && allowed.mlp,
    };
    let start = Instant::now();
    let (outcome, stores) = run_pipeline(&schema, &data, &cfg.pipeline, steps)?;
    let mut checkpoints = Vec::new();
    for (name, tensors) in &stores {
        tensor::checkpoint::save(&out_dir.join(name), tensors)?;
        checkpoints.push(name.clone());
    }
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(
        out_dir.join("config_echo.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;
    std::fs::write(
        out_dir.join("outcome.json"),
        serde_json::to_string_pretty(&outcome)?,
    )?;
    let manifest = ArtifactManifest::from_outcome(
        &outcome,
        config_hash(&cfg),
        cfg.pipeline.seed,
        start.elapsed().as_secs_f64(),
        checkpoints,
    );
    save_manifest(&out_dir, &manifest)?;
    print_manifest(&manifest, Some(&cfg));
    Ok(())
}

fn evaluate(config: &Path, run_dir: &Path) -> Result<(), RecError> {
    let cfg = parse_config(config)?;
    let schema = cfg.load_schema()?;
    cfg.validate(&schema)?;
    let manifest = load_manifest(run_dir)?;
    if !manifest.checkpoints.iter().any(|c| c == "final_model") {
        return Err(RecError::Config("run has no final_model checkpoint".into()));
    }
    let weights = tensor::checkpoint::load(&run_dir.join("final_model"))?;
    let data = cfg.load_data(&schema)?;
    let p = &cfg.pipeline;
    match (&data, cfg.task) {
        (PipelineData::Retrieval { sequences }, Task::NextItem) => {
            let winner = manifest
                .block_winner
                .clone()
                .ok_or_else(|| RecError::Config("manifest has no block winner".into()))?;
            let mut model = Stage1Model::new(&schema, &p.stage1, false, p.seed);
            let mut dice = std::mem::take(&mut model.dice);
            import_model_state(&mut model.store, &mut dice, &weights)?;
            model.dice = dice;
            let split = leave_one_out_split(sequences, p.min_feedback);
            let items = schema
                .item_field()
                .map(|f| f.cardinality)
                .ok_or_else(|| RecError::Config("schema has no item field".into()))?;
            let examples = build_eval_set(
                &split.test,
                items,
                p.stage1.eval_negatives,
                p.stage1.model_seq_len,
                p.seed.wrapping_add(30),
                usize::MAX,
            );
            let m = eval_retrieval(&model, &winner, &examples, p.stage1.batch_users);
            println!("test_hr1 {:.6}\ntest_hr5 {:.6}\ntest_ndcg5 {:.6}", m.hr1, m.hr5, m.ndcg5);
        }
        (PipelineData::Ctr { test, .. }, Task::Ctr) => {
            let winner = manifest
                .mlp_winner
                .clone()
                .ok_or_else(|| RecError::Config("manifest has no MLP winner".into()))?;
            let block_winner = p
                .stage3
                .use_block_winner
                .then_some(manifest.block_winner.as_ref())
                .flatten();
            let mut model = Stage3Model::new(
                &schema,
                &manifest.interactions,
                block_winner,
                &p.stage3,
                p.seed.wrapping_add(50),
            );
            let mut dice = std::mem::take(&mut model.dice);
            import_model_state(&mut model.store, &mut dice, &weights)?;
            model.dice = dice;
            let eval_cfg = Stage3Config { val_batches: usize::MAX, ..p.stage3.clone() };
            let auc = eval_stage3_auc(&model, &winner, test, &eval_cfg);
            println!("test_auc {auc:.6}");
        }
        _ => unreachable!("load_data respects the task"),
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<(), RecError> {
    let dir = if path.is_dir() {
        path.to_path_buf()
    } else if path.file_name().is_some_and(|f| f == MANIFEST_FILE) {
        path.parent().unwrap_or(Path::new(".")).to_path_buf()
    } else {
        return Err(RecError::Config(format!(
            "expected a run directory or {MANIFEST_FILE}, got {}",
            path.display()
        )));
    };
    let manifest = load_manifest(&dir)?;
    print_manifest(&manifest, None);
    Ok(())
}

fn print_manifest(m: &ArtifactManifest, cfg: Option<&RunConfig>) {
    println!("tool version : {}", m.tool_version);
    println!("config hash  : {}", m.config_hash);
    println!("seed         : {}", m.seed);
    if let Some(arch) = &m.block_winner {
        println!("behavior blocks:");
        for line in arch.to_string().lines() {
            println!("  {line}");
        }
    }
    if !m.interactions.is_empty() {
        println!("interactions:");
        let named: Option<Vec<Vec<String>>> = cfg
            .and_then(|c| c.load_schema().ok())
            .map(|s| interactions_to_names(&m.interactions, &s));
        for (i, inter) in m.interactions.iter().enumerate() {
            match &named {
                Some(names) => println!("  {}", names[i].join(" x ")),
                None => println!("  fields {}", inter.key()),
            }
        }
    }
    if let Some(spec) = &m.mlp_winner {
        let tuples: Vec<String> = spec
            .layers
            .iter()
            .zip(spec.widths())
            .map(|(l, w)| format!("({w}, {})", l.act))
            .collect();
        println!("aggregation MLP: {}", tuples.join(" -> "));
    }
    if !m.validation_curve.is_empty() {
        let pts: Vec<String> = m.validation_curve.iter().map(|v| format!("{v:.4}")).collect();
        println!("one-shot validation curve: {}", pts.join(", "));
    }
    for (k, v) in &m.metrics {
        println!("{k} : {v:.6}");
    }
    println!("wall clock   : {:.1}s", m.wall_clock_secs);
}
