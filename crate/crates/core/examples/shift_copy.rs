//! Trains the toy encoder on the previous-token task in each positional mode.
//!
//! `cargo run --release -p tisa-core --example shift_copy -- [steps] [lr] [batch] [iid]`

use tisa::model::{evaluate, train, PositionMode, TaskKind, TokenSampling, ToyModelConfig, TrainOptions};

fn main() -> tisa::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let batch = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(16);
    let sampling = if args.get(4).map(String::as_str) == Some("iid") {
        TokenSampling::Iid
    } else {
        TokenSampling::Permutation
    };
    let task = TaskKind::ShiftCopy { offset: -1 };
    for mode in PositionMode::ALL {
        let config = ToyModelConfig::new(16, 8, 2, 2, 3, 16, mode, 0);
        let opts = TrainOptions {
            steps,
            learning_rate: lr,
            batch_size: batch,
            sampling,
            ..Default::default()
        };
        let out = train(config, task, &opts)?;
        let r = &out.report;
        let long = evaluate(&out.model, task, 32, 256, 0, sampling)
            .map(|a| format!("{a:.3}"))
            .unwrap_or_else(|e| e.to_string());
        println!(
            "{:<18} loss {:.4} acc {:.3} acc@32 {} params {} ({:.1}s)",
            mode.name(),
            r.final_loss,
            r.eval_accuracy,
            long,
            r.positional_param_count,
            r.wall_time_seconds
        );
    }
    Ok(())
}
