use coex::baselines::window_throughput;
use coex::config::{task_preset, Hyperparams};
use coex::meta::{meta_test_finetune, meta_train};
use coex::oracle::optimal_throughput;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let episodes: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let updates: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(250);
    let preset = args.get(4).map(String::as_str).unwrap_or("trainset-8");
    let mut hp = Hyperparams::default();
    hp.episodes = episodes;
    hp.updates_per_episode = updates;
    let tasks = task_preset(preset, hp.fairness_factor).unwrap();

    let t0 = std::time::Instant::now();
    let out = meta_train(&tasks, &hp, seed).unwrap();
    let train_time = t0.elapsed().as_secs_f64();

    // Collection-phase curve for the last few episodes.
    for ep in [0, episodes / 2, episodes.saturating_sub(1)] {
        let row: Vec<String> = out
            .curves
            .iter()
            .filter(|c| c.episode == ep)
            .map(|c| format!("{}={:.2}", c.task, c.sum_throughput))
            .collect();
        println!("ep{ep}: {}", row.join(" "));
    }
    let last = out.losses.last().unwrap();
    println!("final losses: c1={:.3} c2={:.3} kl={:.2} actor={:.3} alpha={:.4}", last.critic1, last.critic2, last.kl, last.actor, last.alpha);

    // Zero-shot evaluation in each training env.
    let t1 = std::time::Instant::now();
    for task in &tasks {
        let oracle = optimal_throughput(&task.scenario).unwrap().value;
        let mut vals = Vec::new();
        for es in 0..3u64 {
            let run = meta_test_finetune(task, &out.agent, 1000 + es, &[], 2000).unwrap();
            vals.push(window_throughput(&run.steps, 1000, 2000));
        }
        vals.sort_by(f64::total_cmp);
        println!(
            "eval {}: median {:.3} oracle {:.3} ratio {:.2}",
            task.label, vals[1], oracle, vals[1] / oracle
        );
    }
    println!("train {train_time:.0}s eval {:.0}s", t1.elapsed().as_secs_f64());
}
