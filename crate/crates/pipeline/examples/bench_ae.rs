use hmap_nn::{mse, Module, Tensor};
use hmap_pipeline::model::{Autoencoder, Modality, ModelConfig};
use std::time::Instant;

fn main() {
    for m in Modality::ALL {
        let mut ae = Autoencoder::<f32>::new(m, &ModelConfig::default());
        let (h, w) = m.input_hw();
        let x = Tensor::<f32>::from_fn(&[16, 1, h, w], |i| ((i % 97) as f32) / 97.0);
        let t = Instant::now();
        let n = 3;
        for _ in 0..n {
            let (y, c) = ae.forward(&x).unwrap();
            let (_, g) = mse(&y, &x).unwrap();
            ae.backward(&c, &g).unwrap();
        }
        let per = t.elapsed().as_secs_f64() / (n * 16) as f64;
        let t = Instant::now();
        ae.encoder.encode(&x).unwrap();
        let enc = t.elapsed().as_secs_f64() / 16.0;
        println!("{m:?}: {:.2} ms per image fwd+bwd, encode {:.2} ms, {} params", per * 1e3, enc * 1e3, ae.param_count());
    }
}
