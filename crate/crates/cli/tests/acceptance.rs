//! End-to-end acceptance run: one line per criterion, non-zero exit if any
//! criterion fails.

#[path = "../../core/tests/common/edit_distance.rs"]
mod edit_distance;
#[path = "../../core/tests/common/gradops.rs"]
mod gradops;
#[path = "../../core/tests/common/infill.rs"]
mod infill;
#[path = "../../core/tests/common/metric_cases.rs"]
mod metric_cases;
#[path = "../../core/tests/common/reference.rs"]
mod reference;
#[path = "../../core/tests/common/templates.rs"]
mod templates;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use spatial_lm::ablation::{full_grid, run_cell, AblationCell, AblationSetup, Gates, PARITY_ROWS, SPATIAL_ROWS};
use spatial_lm::attention::DecoderMode;
use spatial_lm::config::{toy_model, RunConfig};
use spatial_lm::corpus::{block_documents, generate_corpus, Family, SynthesisConfig};
use spatial_lm::instruct::{EncodedPrompt, PromptSet, RenderConfig, Split, Task};
use spatial_lm::model::Model;
use spatial_lm::train::{instruct_tune, pretrain, Objective, TrainConfig};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Outcome {
    let mut worst_op = ("", 0.0f64);
    for case in gradops::op_cases() {
        let e = gradops::check_op(&case, 20);
        if e >= worst_op.1 {
            worst_op = (case.name, e);
        }
    }
    let (model_err, checked) = gradops::check_micro_model(20);
    ensure(
        worst_op.1 < 1e-4 && model_err < 1e-3 && checked >= 20 * 5 * 19,
        format!("worst op {} {:.2e}, micro model {model_err:.2e} over {checked} coordinates", worst_op.0, worst_op.1),
    )
}

fn gate_zero() -> Outcome {
    let d = reference::gate_zero_max_diff(100);
    ensure(d <= 1e-12, format!("max abs diff {d:.2e} over 100 inputs"))
}

fn infill_round_trip() -> Outcome {
    infill::fuzz_round_trip(1000).map(|_| "1000 fuzzed documents".into())
}

struct Summary {
    mean: f64,
    std: f64,
    by_seed: BTreeMap<u64, f64>,
}

fn summary(runs: &[(u64, f64)]) -> Summary {
    let n = runs.len() as f64;
    let mean = runs.iter().map(|r| r.1).sum::<f64>() / n;
    let var = runs.iter().map(|r| (r.1 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Summary {
        mean,
        std: var.sqrt(),
        by_seed: runs.iter().copied().collect(),
    }
}

/// Trains every cell of the combined grid on the form corpus.
fn ablation_grid() -> Result<BTreeMap<String, Summary>, String> {
    let corpus = generate_corpus(&SynthesisConfig {
        families: vec![Family::Form],
        ..SynthesisConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let train = block_documents(&corpus.train, &corpus.vocab).map_err(|e| e.to_string())?;
    let held = block_documents(&corpus.heldout, &corpus.vocab).map_err(|e| e.to_string())?;
    let a = RunConfig::default().ablation;
    let mut model = a.model;
    model.vocab_size = corpus.vocab.size();
    let params = model.num_params();
    if params > 1_000_000 {
        return Err(format!("toy model has {params} parameters"));
    }
    let setup = AblationSetup {
        train_docs: &train,
        heldout_docs: &held,
        specials: *corpus.vocab.specials(),
        model,
        train: a.train,
        eval_seed: a.eval_seed,
    };
    let mut out = BTreeMap::new();
    for cell in full_grid() {
        let mut runs = Vec::new();
        for &seed in &a.seeds {
            let r = run_cell(&setup, &cell, seed).map_err(|e| format!("{}: {e}", cell.name))?;
            runs.push((seed, r.accuracy()));
        }
        let s = summary(&runs);
        println!("    {:<32} {:6.2} ± {:.2}", cell.name, 100.0 * s.mean, 100.0 * s.std);
        out.insert(cell.name, s);
    }
    Ok(out)
}

fn cell(grid: &BTreeMap<String, Summary>, g: Gates, m: DecoderMode, o: Objective) -> &Summary {
    &grid[&AblationCell::new(g, m, o).name]
}

fn spatial_ordering(grid: &BTreeMap<String, Summary>) -> Outcome {
    let infill = |g| cell(grid, g, DecoderMode::Causal, Objective::Infill);
    let t2t = infill(SPATIAL_ROWS[0]);
    let min_gap = SPATIAL_ROWS[1..].iter().map(|&g| infill(g).mean - t2t.mean).fold(f64::INFINITY, f64::min);
    let ss = infill((0.0, 0.0, 1.0));
    let every_seed = t2t.by_seed.iter().all(|(s, a)| ss.by_seed[s] > *a);
    ensure(
        min_gap >= 0.02 && every_seed,
        format!("smallest gap over T2T {:+.2} points, S2S + T2T ahead on every seed: {every_seed}", 100.0 * min_gap),
    )
}

fn objective_ordering(grid: &BTreeMap<String, Summary>) -> Outcome {
    let c = DecoderMode::Causal;
    let ar = cell(grid, (0.0, 0.0, 0.0), c, Objective::Autoregressive).mean;
    let ar_sp = cell(grid, (0.0, 0.0, 1.0), c, Objective::Autoregressive).mean;
    let inf_sp = cell(grid, (0.0, 0.0, 1.0), c, Objective::Infill).mean;
    ensure(
        ar_sp - ar >= 0.01 && inf_sp - ar_sp >= 0.01,
        format!("causal {:.2} < causal+spatial {:.2} < infill+spatial {:.2}", 100.0 * ar, 100.0 * ar_sp, 100.0 * inf_sp),
    )
}

fn decoder_parity(grid: &BTreeMap<String, Summary>) -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for &g in &PARITY_ROWS {
        let c = cell(grid, g, DecoderMode::Causal, Objective::Infill);
        let p = cell(grid, g, DecoderMode::Prefix, Objective::Infill);
        let delta = (c.mean - p.mean).abs();
        let bound = c.std.max(p.std);
        ok &= delta < bound;
        details.push(format!("{:.2}/{:.2}", 100.0 * delta, 100.0 * bound));
    }
    ensure(ok, format!("|delta|/std per config: {}", details.join(" ")))
}

fn metric_suite() -> Outcome {
    metric_cases::spot_values();
    metric_cases::lev_fuzz(10_000);
    Ok("spot values and 10k edit-distance pairs".into())
}

fn template_suite() -> Outcome {
    templates::golden_templates();
    templates::rendered_records();
    templates::flattening();
    templates::prompt_set_hygiene();
    Ok("golden prompts, flattening and split hygiene".into())
}

fn instruction_overfit() -> Outcome {
    let cfg = RunConfig::default();
    let corpus = generate_corpus(&cfg.corpus).map_err(|e| e.to_string())?;
    let docs = block_documents(&corpus.train, &corpus.vocab).map_err(|e| e.to_string())?;
    let specials = *corpus.vocab.specials();
    let mut mcfg = toy_model();
    mcfg.vocab_size = corpus.vocab.size();
    let model = Model::<f32>::new(mcfg, 0).map_err(|e| e.to_string())?;
    let (model, _) = pretrain(model, &docs, &specials, &cfg.pretrain, |_| {}).map_err(|e| e.to_string())?;

    let rc = RenderConfig {
        mcq_choices: cfg.instruct.mcq_choices,
        absent_keys: cfg.instruct.absent_keys,
    };
    let set = PromptSet::build(&corpus, &rc, 0).map_err(|e| e.to_string())?;
    let prompts: Vec<&EncodedPrompt> = set
        .encoded
        .iter()
        .filter(|p| p.split == Split::Train && p.task == Task::Kie)
        .take(20)
        .collect();
    let max_len = cfg.instruct.max_len.min(model.config.max_context);
    let seqs = prompts
        .iter()
        .map(|p| p.train_sequence(&specials, max_len))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let tcfg = TrainConfig {
        epochs: 60,
        lr: 3e-3,
        warmup_steps: 5,
        seed: 0,
        chunk_len: max_len,
        ..cfg.instruct.train
    };
    let (model, _) = instruct_tune(model, &seqs, &tcfg, |_| {}).map_err(|e| e.to_string())?;
    let mut hits = 0;
    for p in &prompts {
        let out = p.predict(&model, &specials, max_len, cfg.instruct.max_new_tokens).map_err(|e| e.to_string())?;
        hits += usize::from(corpus.vocab.decode(&out) == corpus.vocab.decode(&p.response_tokens));
    }
    ensure(prompts.len() == 20 && hits == 20, format!("{hits}/{} exact", prompts.len()))
}

fn slm(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_slm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("slm {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline(root: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let s = |p: &Path| p.display().to_string();
    let (gen, pre, ev) = (root.join("gen"), root.join("pretrain"), root.join("eval"));
    let sets = ["--set", "seed=7", "--set", "corpus.n_docs=200", "--set", "corpus.n_heldout=20"];
    let corpus = gen.join("corpus");
    let ckpt = pre.join("model.ckpt");
    slm(&[&["gen-corpus", "--run-dir", &s(&gen)][..], &sets].concat())?;
    slm(&[&["pretrain", "--corpus", &s(&corpus), "--run-dir", &s(&pre)][..], &sets].concat())?;
    slm(&[&["eval", "--checkpoint", &s(&ckpt), "--corpus", &s(&corpus), "--run-dir", &s(&ev)][..], &sets].concat())?;
    let read = |p: std::path::PathBuf| std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
    Ok((read(pre.join("metrics.jsonl"))?, read(ev.join("metrics.jsonl"))?))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = pipeline(&dir.path().join("a"))?;
    let b = pipeline(&dir.path().join("b"))?;
    ensure(
        !a.0.is_empty() && a == b,
        format!("pretrain log {} bytes, eval log {} bytes, identical: {}", a.0.len(), a.1.len(), a == b),
    )
}

fn run(n: usize, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        Err(msg)
    });
    let secs = t.elapsed().as_secs_f64();
    let (verdict, detail) = match &r {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n:>2} {verdict}  {detail}  ({secs:.1}s)");
    r.is_ok()
}

fn main() -> ExitCode {
    std::panic::set_hook(Box::new(|_| {}));
    let mut ok = true;
    ok &= run(1, gradients);
    ok &= run(2, gate_zero);
    ok &= run(3, infill_round_trip);

    let t = Instant::now();
    println!("training the ablation grid (3 seeds)");
    let grid = catch_unwind(ablation_grid).unwrap_or_else(|_| Err("grid panicked".into()));
    println!("grid finished in {:.0}s", t.elapsed().as_secs_f64());
    for (n, check) in [
        (4, spatial_ordering as fn(&BTreeMap<String, Summary>) -> Outcome),
        (5, objective_ordering),
        (6, decoder_parity),
    ] {
        ok &= run(n, || grid.as_ref().map_err(Clone::clone).and_then(check));
    }

    ok &= run(7, metric_suite);
    ok &= run(8, template_suite);
    ok &= run(9, instruction_overfit);
    ok &= run(10, determinism);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
