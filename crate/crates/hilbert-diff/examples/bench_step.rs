use hilbert_diff::config::TrainConfig;
use hilbert_diff::tasks::TaskContext;
use hilbert_diff::trainer::Trainer;
use std::time::Instant;

fn main() {
    for width in [32usize, 64] {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&format!("res = 32\nbatch = 16\nrate = 4\nwidth = {width}\ntime_dim = 64\n"))
            .unwrap();
        let mut tr = Trainer::new(&cfg).unwrap();
        let t0 = Instant::now();
        for _ in 0..4 {
            tr.train_step().unwrap();
        }
        let step_ms = t0.elapsed().as_secs_f64() * 250.0;
        let ctx = TaskContext::new(tr.network().clone(), tr.config().clone()).unwrap();
        let t1 = Instant::now();
        let _ = ctx.sample(32, 1).unwrap();
        let s32 = t1.elapsed().as_secs_f64();
        let t2 = Instant::now();
        let _ = ctx.sample(64, 1).unwrap();
        let s64 = t2.elapsed().as_secs_f64();
        println!("width {width}: step {step_ms:.0} ms, sample32 {s32:.2} s, sample64 {s64:.2} s");
    }
}
