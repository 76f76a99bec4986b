// scratch experiment for sizing the training-sanity settings; removed once tuned
use detrs::backbone::BackboneSpec;
use detrs::datapipe::{synth_shapes, NormalizeSpec};
use detrs::detector::{evaluate_dataset, Detector, DetectorConfig};
use detrs::scaling::Family;
use detrs::schedule::{train, ScheduleKind, TrainOptions, TrainRecipe, TrainState};
use detrs::tensor::ParamStore;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let width: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.0625);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let batch: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(4);
    let steps: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(500);

    let mut cfg = DetectorConfig::new(Family::RetinanetRs, 2, 512);
    cfg.width_mult = width;
    cfg.backbone = BackboneSpec { width_mult: width, stochastic_depth_init: 0.0, ..Default::default() };
    let mut store = ParamStore::new();
    let det = Detector::new(&mut store, 42, cfg).unwrap();
    println!("trainable params: {}", store.num_trainable_scalars());

    let ds = synth_shapes(8, 7);
    let mut recipe = TrainRecipe::desk(512);
    recipe.batch_size = batch;
    recipe.base_lr = lr;
    recipe.epochs = 4000;
    recipe.warmup_epochs = 10.0;
    recipe.schedule = ScheduleKind::StepTail;
    recipe.step_tail.first_drop_last_epochs = 2.0;
    recipe.step_tail.second_drop_last_epochs = 1.0;
    recipe.weight_decay = 0.0;
    recipe.sd_init = 0.0;
    recipe.jitter.scale_range = (1.0, 1.0);

    let mut state = TrainState { store, step: 0, epoch: 0, seed: 42 };
    let norm = NormalizeSpec::default();
    let t = Instant::now();
    let mut sink = std::io::sink();
    let summary = train(&det, &mut state, &recipe, &ds, &norm, &mut sink, &TrainOptions {
        checkpoint_dir: None,
        max_steps: Some(steps),
    }).unwrap();
    println!(
        "ran {} steps in {:.1}s ({:.2}s/step). loss {:?} -> {:?}",
        summary.steps_run,
        t.elapsed().as_secs_f64(),
        t.elapsed().as_secs_f64() / summary.steps_run as f64,
        summary.initial_loss,
        summary.final_loss
    );
    let t = Instant::now();
    let eval = evaluate_dataset(&det, &mut state.store, &ds, &norm).unwrap();
    println!("eval in {:.1}s: AP {:?}", t.elapsed().as_secs_f64(), eval.ap.ap);
}
