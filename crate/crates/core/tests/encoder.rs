use drascore::encoder::{read_checkpoint, write_checkpoint, Checkpoint, Conditioning, EncoderConfig, Network};
use drascore::tensor::Tensor;

fn small(conditioning: Conditioning) -> EncoderConfig {
    EncoderConfig {
        channels: vec![1, 3, 4],
        strides: vec![1, 2],
        experts: 3,
        embedding_dim: 4,
        conditioning,
        hyper_hidden: 4,
    }
}

fn patches(b: usize, d: usize, seed: u32) -> Tensor<f32> {
    Tensor::from_fn(&[b, 1, d, d, d], |i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 500.0 - 1.0)
}

fn randomize_routing(net: &mut Network<f32>) {
    for p in net.params.iter_mut().filter(|p| p.name.ends_with(".routing")) {
        for (i, v) in p.value.data_mut().iter_mut().enumerate() {
            *v = ((i as f32) * 1.7).sin() * 2.0;
        }
    }
}

#[test]
fn checkpoint_file_round_trip_preserves_outputs() {
    let mut net: Network<f32> = Network::new(&small(Conditioning::LocCondConv), 4).unwrap();
    randomize_routing(&mut net);
    let mut c = Checkpoint::new(net.config.clone(), 8, 0, 0.999);
    c.insert_network("q/", &net).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.dras");
    write_checkpoint(&c, &path).unwrap();
    let back = read_checkpoint(&path).unwrap().network("q/").unwrap();
    let x = patches(2, 8, 1);
    let coords = [[0.2, -0.5, 0.9]];
    assert_eq!(net.encode(x.clone(), &coords).unwrap().data(), back.encode(x, &coords).unwrap().data());
}

#[test]
fn missing_checkpoint_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = read_checkpoint(&dir.path().join("none.dras")).unwrap_err();
    assert!(matches!(err, drascore::Error::MissingArtifact(_)), "{err}");
}

#[test]
fn every_conditioning_variant_encodes() {
    for c in [Conditioning::None, Conditioning::Concat, Conditioning::HyperNet, Conditioning::LocCondConv] {
        let cfg = small(c);
        let net: Network<f32> = Network::new(&cfg, 0).unwrap();
        let out = net.encode(patches(3, 8, 2), &[[0.0, 0.1, -0.1]]).unwrap();
        assert_eq!(out.shape(), &[3, cfg.representation_dim()]);
        assert!(out.is_finite());
    }
}

#[test]
fn per_sample_coordinates_match_shared_coordinate() {
    let mut net: Network<f32> = Network::new(&small(Conditioning::LocCondConv), 1).unwrap();
    randomize_routing(&mut net);
    let p = [0.3, -0.2, 0.6];
    let shared = net.encode(patches(3, 8, 3), &[p]).unwrap();
    let each = net.encode(patches(3, 8, 3), &[p, p, p]).unwrap();
    assert!(shared.max_abs_diff(&each) < 1e-6);
}

#[test]
fn routing_makes_the_encoder_location_aware() {
    let mut net: Network<f32> = Network::new(&small(Conditioning::LocCondConv), 1).unwrap();
    let x = patches(2, 8, 4);
    let (p, q) = ([0.5, 0.5, 0.5], [-0.5, 0.2, -0.9]);
    // zero routing: alpha is 0.5 everywhere, so the location has no effect
    assert_eq!(net.encode(x.clone(), &[p]).unwrap().data(), net.encode(x.clone(), &[q]).unwrap().data());
    randomize_routing(&mut net);
    assert!(net.encode(x.clone(), &[p]).unwrap().max_abs_diff(&net.encode(x, &[q]).unwrap()) > 1e-4);
}

#[test]
fn f64_and_f32_forward_agree() {
    let net: Network<f64> = Network::new(&small(Conditioning::LocCondConv), 2).unwrap();
    let x32 = patches(2, 8, 5);
    let x64 = x32.cast::<f64>();
    let a = net.encode(x64, &[[0.1, 0.2, 0.3]]).unwrap();
    let b = net.cast::<f32>().encode(x32, &[[0.1, 0.2, 0.3]]).unwrap();
    assert!(a.cast::<f32>().max_abs_diff(&b) < 1e-4);
}

#[test]
fn invalid_config_rejected() {
    let mut cfg = small(Conditioning::LocCondConv);
    cfg.strides = vec![1];
    assert!(Network::<f32>::new(&cfg, 0).is_err());
}
