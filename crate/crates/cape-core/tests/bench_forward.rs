//! Manual throughput probes (run with --ignored).

use std::time::Instant;

use cape_core::autodiff::Tensor;
use cape_core::model::{Model, ModelConfig};
use cape_core::params::Net;
use cape_core::rng::stream;
use cape_core::synth::{make_category, synthetic_episode};

fn time_forward(cfg: ModelConfig, trainable: bool, reps: usize) -> f64 {
    let model = Model::new(cfg).unwrap();
    let params = model.init_params(1);
    let mut cat_rng = stream(2, &[0]);
    let spec = make_category(&mut cat_rng, (6, 6), 0.3, 0.0, 2.0, 3.0, 1, "bench", 2).unwrap();
    let mut ep_rng = stream(2, &[1]);
    let episode = synthetic_episode(&spec, cfg.image_size, 0.02, 1, &mut ep_rng).unwrap();

    let start = Instant::now();
    for _ in 0..reps {
        let mut net = Net::new(&params, trainable);
        let fwd = model.forward(&mut net, &episode).unwrap();
        let (loss, _) = model.episode_loss(&mut net, &fwd, &episode).unwrap();
        if trainable {
            net.tape.backward(loss, &Tensor::scalar(1.0)).unwrap();
            let _ = net.collect_grads();
        }
    }
    start.elapsed().as_secs_f64() / reps as f64
}

#[test]
#[ignore]
fn bench_tiny_eval() {
    let t = time_forward(ModelConfig::tiny(), false, 200);
    println!("tiny eval forward+loss: {:.3} ms", t * 1e3);
}

#[test]
#[ignore]
fn bench_default_train_step() {
    let t = time_forward(ModelConfig::default(), true, 10);
    println!("default forward+loss+backward: {:.1} ms", t * 1e3);
}
