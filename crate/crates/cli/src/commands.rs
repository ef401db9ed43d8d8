use std::fs;
use std::path::Path;

use tisa::fit::FitTarget;
use tisa::introspect::{extract_all, position_similarity, Similarity};
use tisa::io::{format_value, read_bundle, read_matrix, save_checkpoint, write_kernels, write_matrix};
use tisa::model::{count_positional_params, train as train_model, ArchSpec, TaskKind, ToyModelConfig, TrainOptions};
use tisa::{aligned_sections, extract_positional_scores, fit_kernel_ladder, fit_kernels, toeplitzness};
use tisa::{Error, FitOptions, KernelParams, OffsetProfile, TisaStack};

use crate::failure::{Failure, Outcome};
use crate::table::{read_profile, sibling, write_heatmap, write_profile, Table};
use crate::{parse_sampling, AnalyzeArgs, CountArgs, ExtractArgs, FitArgs, TrainArgs};

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::output(format!("{}: {e}", path.display())))
}

pub fn analyze(args: &AnalyzeArgs) -> Outcome {
    let e_p = read_matrix(&args.embeddings).map_err(Failure::input)?;
    let inner = toeplitzness(&position_similarity(&e_p, Similarity::InnerProduct)).map_err(Failure::numerical)?;
    let cosine = toeplitzness(&position_similarity(&e_p, Similarity::Cosine)).map_err(Failure::numerical)?;
    let (selected, kind) = if args.cosine {
        (&cosine, Similarity::Cosine)
    } else {
        (&inner, Similarity::InnerProduct)
    };
    write_heatmap(&args.out, &position_similarity(&e_p, kind))?;
    if let Some(path) = &args.profile_out {
        write_profile(path, selected.profile.iter())?;
    }
    println!("r2={:?}", selected.r2);
    println!("r2_inner_product={:?}", inner.r2);
    println!("r2_cosine={:?}", cosine.r2);
    Ok(())
}

pub fn extract(args: &ExtractArgs) -> Outcome {
    let bundle = read_bundle(&args.bundle).map_err(Failure::input)?;
    if args.all {
        let heads = extract_all(&bundle, args.jobs.max(1)).map_err(Failure::input)?;
        fs::create_dir_all(&args.out).map_err(|e| Failure::output(format!("{}: {e}", args.out.display())))?;
        for h in heads {
            let path = args.out.join(format!("layer{}_head{}.tmx", h.layer, h.head));
            write_matrix(&path, &h.scores).map_err(Failure::output)?;
            println!("layer={} head={} r2={:?}", h.layer, h.head, h.fit.r2);
        }
        return Ok(());
    }

    let scores = extract_positional_scores(&bundle, args.layer, args.head).map_err(Failure::input)?;
    let fit = toeplitzness(&scores).map_err(Failure::numerical)?;
    write_matrix(&args.out, &scores).map_err(Failure::output)?;
    if let Some(path) = &args.profile_out {
        write_profile(path, fit.profile.iter())?;
    }
    if !args.sections.is_empty() {
        let sections = aligned_sections(&scores, &args.sections, args.half_width).map_err(Failure::input)?;
        let path = args
            .sections_out
            .clone()
            .unwrap_or_else(|| sibling(&args.out, "sections.csv"));
        let mut t = Table::create(&path, &["row", "offset", "value"])?;
        for s in &sections {
            if s.clipped {
                eprintln!("warning: section for row {} clipped at the matrix edge", s.row);
            }
            for &(k, v) in &s.points {
                t.row([s.row.to_string(), k.to_string(), format_value(v)])?;
            }
        }
        t.finish()?;
    }
    println!("r2={:?}", fit.r2);
    Ok(())
}

pub fn fit(args: &FitArgs) -> Outcome {
    let pairs = read_profile(&args.profile)?;
    let profile = OffsetProfile::from_pairs(&pairs).map_err(Failure::input)?;
    let opts = FitOptions {
        kernels: args.kernels,
        window: args.window,
        restarts: args.restarts,
        max_iters: args.max_iters,
        seed: args.seed,
        ..FitOptions::default()
    };
    if opts.kernels == 0 {
        return Err(Failure::input("at least one kernel is required"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(Failure::input)?;
    let result = pool.install(|| -> Result<_, Failure> {
        if args.ladder {
            let ladder = fit_kernel_ladder(&profile, &opts).map_err(Failure::input)?;
            for (s, r) in ladder.iter().enumerate() {
                eprintln!("S={} rss={:?}", s + 1, r.rss);
            }
            Ok(ladder.into_iter().last().expect("at least one kernel"))
        } else {
            fit_kernels(&profile, &opts).map_err(Failure::input)
        }
    })?;
    if !result.rss.is_finite() {
        return Err(Failure::numerical("fit produced a non-finite residual"));
    }

    let params = KernelParams::new(result.params.kernels.clone(), 0, 0);
    let stack = TisaStack::new(1, 1, args.d_k, vec![params.clone()]).map_err(Failure::input)?;
    write_kernels(&args.out, &stack).map_err(Failure::output)?;

    let target = FitTarget::new(&profile, args.window).map_err(Failure::input)?;
    let path = args
        .samples_out
        .clone()
        .unwrap_or_else(|| sibling(&args.out, "samples.csv"));
    let mut t = Table::create(&path, &["offset", "target", "fitted"])?;
    for k in target.offsets() {
        let y = profile.get(k).expect("target offsets come from the profile");
        t.row([k.to_string(), format_value(y), format_value(params.eval(k))])?;
    }
    t.finish()?;

    println!("rss={:?}", result.rss);
    println!("iterations={}", result.iterations);
    Ok(())
}

pub fn train(args: &TrainArgs) -> Outcome {
    let task = match args.task.as_str() {
        "shift_copy" => TaskKind::ShiftCopy { offset: args.offset },
        "distance_class" => TaskKind::DistanceClass {
            max_distance: args.max_distance,
        },
        other => return Err(Failure::input(format!("unknown task {other:?}"))),
    };
    let mut config = ToyModelConfig::new(
        args.vocab,
        args.d_k,
        args.heads,
        args.layers,
        args.kernels,
        args.n,
        args.mode,
        args.seed,
    );
    config.freeze_position_embeddings = args.freeze_pe;
    let opts = TrainOptions {
        steps: args.steps,
        batch_size: args.batch,
        learning_rate: args.lr,
        eval_len: args.eval_len,
        sampling: parse_sampling(&args.sampling)?,
        ..TrainOptions::default()
    };

    let outcome = train_model(config, task, &opts).map_err(|e| match e {
        Error::Divergence { .. } => Failure::numerical(e),
        other => Failure::input(other),
    })?;
    save_checkpoint(&args.out, &outcome.model).map_err(Failure::output)?;
    let mut report = serde_json::to_string_pretty(&outcome.report).map_err(Failure::output)?;
    report.push('\n');
    write_text(&args.out.join("report.json"), &report)?;

    let r = &outcome.report;
    println!("accuracy={:?}", r.eval_accuracy);
    println!("eval_len={}", r.eval_len);
    println!("final_loss={:?}", r.final_loss);
    println!("positional_params={}", r.positional_param_count);
    eprintln!("trained in {:.1}s", r.wall_time_seconds);
    Ok(())
}

pub fn count_params(args: &CountArgs) -> Outcome {
    let spec = ArchSpec {
        n: args.n as usize,
        d: args.d as usize,
        kernels: args.s as usize,
        heads: args.h as usize,
        layers: args.l as usize,
        scheme: args.scheme,
    };
    println!("{}", count_positional_params(&spec));
    Ok(())
}
