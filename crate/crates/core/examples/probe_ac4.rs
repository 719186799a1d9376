use crossview_core::model::{CrossViewConfig, CrossViewModel, TransformKind};
use crossview_core::synth::{generate_split, Split, SynthConfig, CLASS_NAMES};
use crossview_core::train::{evaluate_aerial, train_crossview, TrainConfig, Progress};
fn env<T: std::str::FromStr>(k: &str, d: T) -> T { std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d) }
fn main() {
    let t = std::time::Instant::now();
    let sc = SynthConfig::default();
    let train = generate_split(1, Split::Train, env("N", 512), &sc).unwrap();
    let test = generate_split(1, Split::Test, 128, &sc).unwrap();
    let mut mc = CrossViewConfig::desk();
    if env("NAIVE", 0) == 1 { mc.transform = TransformKind::Naive; }
    if let Ok(fw) = std::env::var("FW") { mc.f_widths = fw.split(',').map(|v| v.parse().unwrap()).collect(); }
    mc.d_s = env("DS", mc.d_s);
    let mut model = CrossViewModel::<f32>::new(mc, env("SEED", 1)).unwrap();
    if env("ZERO", 0) == 1 { model.zero_output_layer(); }
    let cfg = TrainConfig { epochs: env("EPOCHS", 10), lr: env("LR", 3e-3), batch_size: env("BATCH", 4), sparse_grid: (env("GH", 4), env("GW", 8)), clip_norm: env("CLIP", 10.0), ..TrainConfig::default() };
    let log = train_crossview(&mut model, &train, &cfg, Some(&test), &mut |p| {
        if let Progress::Epoch { epoch, metrics: Some(m) } = p {
            println!("epoch {epoch} {:.1}s acc={:.4} ce={:.4} mp={:.3}", t.elapsed().as_secs_f64(), m.accuracy(), m.mean_ce(), m.mean_precision());
        }
    }).unwrap();
    println!("final loss {}", log.losses.last().unwrap());
    let m = crossview_core::train::evaluate(&model, &test).unwrap();
    println!("final eval acc={:.4} ce={:.4}", m.accuracy(), m.mean_ce());
    crossview_core::train::refresh_batch_norm(&mut model, &train, 8).unwrap();
    let m = crossview_core::train::evaluate(&model, &test).unwrap();
    println!("refreshed acc={:.4} ce={:.4}", m.accuracy(), m.mean_ce());
    let a = evaluate_aerial(&model, &test).unwrap();
    println!("aerial {}", a.to_text(&CLASS_NAMES));
}
