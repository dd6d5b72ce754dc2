//! Reduced-scale dry run of the transfer protocol, ignored by default:
//! `cargo test -p metaopt-cli --test probe -- --ignored --nocapture`

use std::path::Path;
use std::time::Instant;

use metaopt_cli::config::parse_config;
use metaopt_cli::runner;
use metaopt_core::data::synth;

#[test]
#[ignore]
fn reduced_scale_ordering_probe() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth::write_mnist(&data, 20_000, 1_000, 11).unwrap();
    let out = tmp.path().join("out");
    let text = format!(
        "dataset = mnist\ndata_dir = {}\noutput_dir = {}\n\
         arms = L2L, L2L-Transfer, Transfer-NOT, ADAM\n\
         epsilons = 0.1\nseeds = 1\n\
         batch_size = 128\noptimizee_steps = 100\n\
         attack.kind = fgsm\n\
         meta.episodes = 20\nmeta.unroll = 20\nmeta.steps_per_episode = 100\n",
        data.display(),
        out.display()
    );
    let cfg = parse_config(&text, Path::new("probe")).unwrap();
    let t0 = Instant::now();
    let result = runner::run(&cfg).unwrap();
    eprintln!("probe grid done in {:?}", t0.elapsed());
    for cell in &result.cells {
        let first = cell.curve.first().unwrap();
        let last = cell.curve.last().unwrap();
        eprintln!(
            "{:<14} eps={} seed={}: train {:.4} -> {:.4}, adv_eval {:.4} -> {:.4}",
            cell.arm.label(),
            cell.epsilon,
            cell.seed,
            first.train_loss,
            last.train_loss,
            first.adv_eval_loss,
            last.adv_eval_loss
        );
    }
}
