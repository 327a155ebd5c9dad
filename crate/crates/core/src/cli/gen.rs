use serde_json::json;

use super::{manifest, required, Cli, GenArgs, EXIT_OK};
use crate::dataset::write_jsonl;
use crate::env::{sample_pair_dataset, sample_preference_dataset, EnvSpec, GroundTruth};
use crate::error::Result;
use crate::rng;
use crate::trainer::fit_reference_policy;

pub const SFT_TOLERANCE: f64 = 1e-8;

pub fn run(cli: &Cli, args: &GenArgs) -> Result<i32> {
    let out = required(&cli.out, "out")?;
    let seed = cli.seed.unwrap_or(0);
    let spec = EnvSpec::load(&args.env_file)?;
    let env = &spec.env;
    manifest::create_dir(&out)?;

    let prefs = sample_preference_dataset(env, args.n_pref as usize, seed)?;
    let reference = sample_pair_dataset(env, &spec.sft_generator, args.n_ref as usize, seed, rng::REFERENCE)?;
    let pretrain = if args.n_pretrain == 0 {
        Vec::new()
    } else {
        sample_pair_dataset(env, &spec.pretrain_generator, args.n_pretrain as usize, seed, rng::PRETRAIN)?
    };
    let sft = fit_reference_policy(&reference, env.shape(), args.sft_step_size, args.sft_steps, SFT_TOLERANCE)?;
    if !sft.converged {
        eprintln!(
            "warning: reference fit stopped after {} steps with gradient max-norm {:e} (target {SFT_TOLERANCE:e}); \
             unobserved (x, y) cells have no finite maximum-likelihood logit",
            sft.steps_run, sft.grad_max_norm
        );
    }

    write_jsonl(&out.join("pref.jsonl"), &prefs)?;
    write_jsonl(&out.join("ref.jsonl"), &reference)?;
    write_jsonl(&out.join("pretrain.jsonl"), &pretrain)?;
    sft.policy.save_json(&out.join("ref_policy.json"))?;
    let env_text = spec.to_json_string();
    std::fs::write(out.join("env.json"), &env_text).map_err(|e| crate::LabError::io(out.join("env.json"), e))?;

    let (mode, reward_hash) = match env.truth() {
        GroundTruth::BradleyTerry(r) => ("bt", Some(manifest::sha256_hex(&serde_json::to_vec(&r.table().to_rows()).expect("reward serializes")))),
        GroundTruth::Free(_) => ("free", None),
    };
    let mut files = serde_json::Map::new();
    for name in ["pref.jsonl", "ref.jsonl", "pretrain.jsonl", "ref_policy.json", "env.json"] {
        files.insert(name.into(), json!(manifest::file_sha256(&out.join(name))?));
    }
    let doc = json!({
        "command": "gen",
        "tool": manifest::tool_version(),
        "seed": seed,
        "mode": mode,
        "reward_sha256": reward_hash,
        "env_sha256": manifest::sha256_hex(env_text.as_bytes()),
        "shape": [env.num_contexts(), env.num_responses()],
        "config": {
            "n_pref": args.n_pref,
            "n_ref": args.n_ref,
            "n_pretrain": args.n_pretrain,
            "sft_steps": args.sft_steps,
            "sft_step_size": args.sft_step_size,
            "sft_tolerance": SFT_TOLERANCE,
        },
        "sft": {
            "converged": sft.converged,
            "steps_run": sft.steps_run,
            "grad_max_norm": sft.grad_max_norm,
        },
        "files": files,
    });
    manifest::write(&out.join("manifest.json"), &doc)?;
    println!(
        "wrote {} preferences, {} reference and {} pretraining records to {}",
        prefs.len(),
        reference.len(),
        pretrain.len(),
        out.display()
    );
    Ok(EXIT_OK)
}
