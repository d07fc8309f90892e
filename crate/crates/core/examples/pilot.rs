use interformer::harness::{run_study, StudySpec};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let mut spec = StudySpec::desk();
    spec.seeds = vec![args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0)];
    spec.eval_every = 250;
    for a in args.iter().skip(2) {
        spec.base.apply_override(a).unwrap();
    }
    let r = run_study(&spec).unwrap();
    for run in &r.runs {
        println!("seed {} coco {} {:.0}s", run.seed, run.coco, run.seconds);
        for c in &run.curve {
            println!("  {:>5} miou {:.4} illusion {:.4}", c.iteration, c.miou, c.illusion_rate);
        }
        println!("  iou {:?}", run.report.per_class_iou);
    }
}
