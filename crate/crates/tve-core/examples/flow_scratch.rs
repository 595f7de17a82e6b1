//! Scratch experiment: flow termination behavior across positivity levels.
//! Run: cargo run -p tve-core --example flow_scratch --release -- <beta_p> <n>

use tve_core::data::{simulate, DgdKind, DgdSpec};
use tve_core::eif::{moments, sigma2_plugin};
use tve_core::learners::{fit_nuisances, LearnerSpec};
use tve_core::numerics::derive_stream;
use tve_core::variance::{var_iterative, var_onestep, IterativeOptions, OneStepOptions, Termination};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let beta_p: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    let n: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(500);
    let seeds: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(20);
    let spec = DgdSpec::new(DgdKind::Simple, beta_p, 0.0).unwrap();
    let learner = LearnerSpec::default_for(3);
    println!("beta_p={beta_p} n={n}");
    let mut os_solved = 0;
    let mut it_solved = 0;
    for seed in 0..seeds {
        let stream = derive_stream(2024, seed);
        let (d, _) = simulate(&spec, n, stream).unwrap();
        let fit0 = match fit_nuisances(&d, &learner, stream) {
            Ok(f) => f,
            Err(e) => {
                println!("  seed {seed}: fit failed: {e}");
                continue;
            }
        };
        let ss = sigma2_plugin(&fit0, &moments(&fit0).unwrap());
        let os = var_onestep(&d, &fit0, &OneStepOptions::default()).unwrap();
        let it = var_iterative(&d, &fit0, &IterativeOptions::default()).unwrap();
        for (tag, t) in [("os", &os.trace), ("it", &it.trace)] {
            let solved = matches!(t.termination, Termination::Solved | Termination::AlreadySolved);
            if solved {
                if tag == "os" {
                    os_solved += 1;
                } else {
                    it_solved += 1;
                }
            }
        }
        if seeds <= 30 {
            println!(
                "  seed {seed}: os {:?} steps {} |pn| {:.4} s2 {:.3} | it {:?} rounds {} |pn| {:.4} s2 {:.3} | ss {ss:.3}",
                os.trace.termination,
                os.trace.steps,
                os.trace.pn_eif_path.last().unwrap().abs(),
                os.sigma2,
                it.trace.termination,
                it.trace.steps,
                it.trace.pn_eif_path.last().unwrap().abs(),
                it.sigma2
            );
        }
    }
    println!("onestep solved {os_solved}/{seeds}, iterative solved {it_solved}/{seeds}");
}
