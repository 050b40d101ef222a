use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contrastive::{local_loss, neighbor_loss};
use crate::encoder::{BnMode, Conditioning, EncoderConfig, ForwardOptions, Network};
use crate::error::Result;
use crate::tensor::{grad_check, GradCheckReport, Tensor};

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(v.iter().map(|x| x / n));
    }
    out
}

/// Central-difference step of the composite check.
pub const COMPOSITE_EPS: f64 = 3e-5;

/// Finite-difference check of the local plus neighbourhood loss with respect to every
/// parameter of a small location-conditioned encoder, in 64-bit.
pub fn composite_grad_check(seed: u64, eps: f64) -> Result<GradCheckReport> {
    let cfg = EncoderConfig {
        channels: vec![1, 3, 4],
        strides: vec![1, 2],
        experts: 2,
        embedding_dim: 4,
        conditioning: Conditioning::LocCondConv,
        hyper_hidden: 4,
    };
    let net: Network<f64> = Network::new(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f_6d70);
    let (b, d, k, l) = (2usize, 6usize, 3usize, 2usize);
    let e = cfg.embedding_dim;
    // routing and biases start at zero; random values keep every path away from that point
    let inputs: Vec<Tensor<f64>> = net
        .params
        .iter()
        .map(|p| {
            if p.value.data().iter().all(|&v| v == 0.0) {
                Tensor::from_fn(p.value.shape(), |_| rng.gen_range(-0.5..0.5))
            } else {
                p.value.clone()
            }
        })
        .collect();
    let vox = b * d * d * d;
    let views: Vec<Tensor<f64>> = (0..=l)
        .map(|_| Tensor::from_fn(&[b, 1, d, d, d], |_| rng.gen_range(-1.0..1.0)))
        .collect::<Vec<_>>();
    debug_assert_eq!(views[0].len(), vox);
    let coords: Vec<[f64; 3]> = (0..=l).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let k_plus = Tensor::new(vec![b, e], unit_rows(&mut rng, b, e))?;
    let negatives: Vec<Vec<f64>> = (0..b).map(|_| unit_rows(&mut rng, k, e)).collect();
    let opts = ForwardOptions::new(BnMode::Train);
    grad_check(
        |tape, vars| {
            let x = tape.constant(views[0].clone());
            let q = net.forward(tape, vars, x, &coords[..1], &opts)?;
            let local = local_loss(tape, q.embedding, &k_plus, &negatives, k, 0.2)?;
            let mut rs = Vec::with_capacity(l);
            for n in 1..=l {
                let x = tape.constant(views[n].clone());
                rs.push(net.forward(tape, vars, x, &coords[n..=n], &opts)?.embedding);
            }
            let neighbor = neighbor_loss(tape, &rs, &k_plus, &negatives, k, 0.2)?;
            tape.add(local, neighbor)
        },
        &inputs,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_gradients_match_differences() {
        let r = composite_grad_check(3, COMPOSITE_EPS).unwrap();
        assert!(r.passed(1e-4), "{r:?}");
        assert!(r.checked > 100);
    }
}
