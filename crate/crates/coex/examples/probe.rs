use coex::baselines::{run_scratch_baseline, window_throughput, BaselineKind};
use coex::config::{parse_scenario, Hyperparams};
use coex::env::TaskSpec;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scenario = args.get(1).map(String::as_str).unwrap_or("tdma:5");
    let horizon: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(6000);
    let kind = match args.get(3).map(String::as_str) {
        Some("dqn") => BaselineKind::Dqn,
        _ => BaselineKind::ScratchSac,
    };
    let hp = Hyperparams::default();
    let task = TaskSpec::new(parse_scenario(scenario).unwrap(), 0.0);
    for seed in [1u64, 2, 3] {
        let t0 = std::time::Instant::now();
        let steps = run_scratch_baseline(kind, &task, &hp, seed, horizon, 150, 5).unwrap();
        let mut marks = String::new();
        let mut at = 1000;
        while at <= horizon {
            marks.push_str(&format!(" thr[{}..{}]={:.3}", at - 1000, at, window_throughput(&steps, at - 1000, at)));
            at += 1000;
        }
        println!("{scenario} seed {seed} ({:?}):{marks} [{:.1}s]", kind, t0.elapsed().as_secs_f64());
    }
}
