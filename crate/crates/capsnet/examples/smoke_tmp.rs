use capsnet::config::RunConfig;
use capsnet::data::Split;
use capsnet::harness::load_dataset;
use capsnet::train::train_on;
use std::time::Instant;

fn main() {
    let mut cfg = RunConfig::mnist_desk();
    cfg.dataset.data_dir = Some("data/mnist".into());
    cfg.dataset.limit_train = Some(2000);
    cfg.dataset.limit_test = Some(1000);
    cfg.train.epochs = 1;
    cfg.train.out_dir = "/tmp/smoke".into();
    let tr = load_dataset(&cfg.dataset, Split::Train).unwrap();
    let te = load_dataset(&cfg.dataset, Split::Test).unwrap();
    println!("train {} test {}", tr.len(), te.len());
    let t0 = Instant::now();
    let out = train_on(&cfg, &tr, &te).unwrap();
    println!("1 epoch on 2000 samples: {:.1}s, test acc {:.4}", t0.elapsed().as_secs_f64(), out.final_test_acc);
    println!("{}", std::fs::read_to_string(out.metrics_path).unwrap());
}
