use protonet_core::checkpoint::Checkpoint;
use protonet_core::data::{Dataset, EpisodeSampler, EpisodeSpec};
use protonet_core::encoder::*;
use protonet_core::train::{TrainConfig, Trainer};
use protonet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_conv(size: usize, blocks: usize, width: usize, h: usize) -> EncoderConfig {
    EncoderConfig { conv_blocks: blocks, channels_per_block: width, embed_dim: h, ..EncoderConfig::conv_net(size, 1) }
}

/// Direct loops in f64: conv3x3 pad 1, relu, maxpool 2, repeated; then linear.
fn forward_oracle(enc: &Encoder, image: &Tensor) -> Vec<f64> {
    let cfg = &enc.config;
    let mut c = cfg.input_channels;
    let mut s = cfg.input_size;
    let mut x: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
    for b in 0..cfg.conv_blocks {
        let k = &enc.params.get(&block_kernel(b)).unwrap().tensor;
        let bias = &enc.params.get(&block_bias(b)).unwrap().tensor;
        let co = cfg.channels_per_block;
        let mut conv = vec![0.0; co * s * s];
        for o in 0..co {
            for y in 0..s {
                for xx in 0..s {
                    let mut acc = bias.data()[o] as f64;
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if iy < 0 || ix < 0 || iy >= s as isize || ix >= s as isize {
                                    continue;
                                }
                                let w = k.data()[((o * c + ci) * 3 + ky) * 3 + kx] as f64;
                                acc += w * x[(ci * s + iy as usize) * s + ix as usize];
                            }
                        }
                    }
                    conv[(o * s + y) * s + xx] = acc.max(0.0);
                }
            }
        }
        let h = s / 2;
        let mut pooled = vec![0.0; co * h * h];
        for o in 0..co {
            for y in 0..h {
                for xx in 0..h {
                    let at = |dy: usize, dx: usize| conv[(o * s + 2 * y + dy) * s + 2 * xx + dx];
                    pooled[(o * h + y) * h + xx] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                }
            }
        }
        x = pooled;
        c = co;
        s = h;
    }
    linear_oracle(enc, &x)
}

fn linear_oracle(enc: &Encoder, x: &[f64]) -> Vec<f64> {
    let w = &enc.params.get(FC_WEIGHT).unwrap().tensor;
    let b = &enc.params.get(FC_BIAS).unwrap().tensor;
    (0..enc.config.embed_dim)
        .map(|o| b.data()[o] as f64 + x.iter().enumerate().map(|(i, v)| v * w.row(o)[i] as f64).sum::<f64>())
        .collect()
}

#[test]
fn convnet_matches_straight_line_oracle() {
    let enc = Encoder::new(small_conv(16, 2, 4, 8), 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = Tensor::from_fn([1, 16, 16], |_| rng.random_range(0.0f32..1.0));
    let got = enc.encode_convnet(&img).unwrap();
    let want = forward_oracle(&enc, &img);
    assert_eq!(got.len(), 8);
    for (g, w) in got.data().iter().zip(&want) {
        assert!((*g as f64 - w).abs() < 1e-6, "{g} vs {w}");
    }
}

#[test]
fn zero_image_gives_zero_embedding() {
    let enc = Encoder::new(small_conv(16, 3, 5, 6), 1).unwrap();
    let e = enc.encode_convnet(&Tensor::zeros([1, 16, 16])).unwrap();
    assert!(e.data().iter().all(|&v| v == 0.0));
}

#[test]
fn output_length_is_embed_dim() {
    for (size, blocks, width, h) in [(8, 1, 2, 3), (16, 4, 3, 1), (32, 2, 4, 10), (64, 4, 8, 64)] {
        let enc = Encoder::new(small_conv(size, blocks, width, h), 0).unwrap();
        assert_eq!(enc.encode_convnet(&Tensor::full([1, size, size], 0.5)).unwrap().shape(), &[h]);
    }
    let f = Encoder::new(EncoderConfig::frozen_embed(12, 3), 0).unwrap();
    assert_eq!(f.encode_frozen(&Tensor::zeros([12])).unwrap().shape(), &[3]);
}

#[test]
fn shape_mismatch_is_rejected() {
    let enc = Encoder::new(small_conv(16, 2, 4, 8), 0).unwrap();
    assert!(matches!(enc.encode_convnet(&Tensor::zeros([1, 8, 8])), Err(EncoderError::Input { .. })));
    let f = Encoder::new(EncoderConfig::frozen_embed(5, 2), 0).unwrap();
    assert!(f.encode_frozen(&Tensor::zeros([4])).is_err());
    assert!(EncoderConfig { input_size: 20, ..small_conv(16, 3, 4, 8) }.validate().is_err());
}

#[test]
fn frozen_embed_identity_constant_and_matmul() {
    let cfg = EncoderConfig { embed_dim: 4, ..EncoderConfig::frozen_embed(4, 2) };
    let mut enc = Encoder::new(cfg, 0).unwrap();
    let eye = Tensor::from_fn([4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    enc.params.get_mut(FC_WEIGHT).unwrap().tensor = eye;
    let feat = Tensor::new([4], vec![0.5, -1.0, 2.0, 3.25]).unwrap();
    assert_eq!(enc.encode_frozen(&feat).unwrap().data(), feat.data());

    enc.params.get_mut(FC_WEIGHT).unwrap().tensor = Tensor::zeros([4, 4]);
    enc.params.get_mut(FC_BIAS).unwrap().tensor = Tensor::new([4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(enc.encode_frozen(&feat).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);

    let enc = Encoder::new(EncoderConfig::frozen_embed(7, 3), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let feat = Tensor::from_fn([7], |_| rng.random_range(-1.0f32..1.0));
    let x: Vec<f64> = feat.data().iter().map(|&v| v as f64).collect();
    for (g, w) in enc.encode_frozen(&feat).unwrap().data().iter().zip(linear_oracle(&enc, &x)) {
        assert!((*g as f64 - w).abs() < 1e-6);
    }
}

#[test]
fn random_inputs_give_finite_deterministic_embeddings() {
    let enc = Encoder::new(small_conv(16, 4, 8, 16), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let batch = Tensor::from_fn([100, 1, 16, 16], |_| rng.random_range(0.0f32..1.0));
        let a = enc.embed(&batch).unwrap();
        assert!(a.is_finite());
        assert_eq!(a, enc.embed(&batch).unwrap());
    }
}

#[test]
fn frozen_blocks_survive_training_bitwise() {
    let cfg = EncoderConfig { frozen_blocks: 1, ..small_conv(8, 2, 3, 4) };
    let enc = Encoder::new(cfg, 9).unwrap();
    let before = enc.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples = (0..20).map(|_| Tensor::from_fn([1, 8, 8], |_| rng.random_range(0.0f32..1.0))).collect();
    let data = Dataset::new(samples, (0..20).map(|i| i % 2).collect(), 2).unwrap();
    let tc = TrainConfig { ways: 2, shots: 2, query: 2, episodes_per_epoch: 15, lr0: 0.05, ..Default::default() };
    let mut trainer = Trainer::new(enc, tc.clone()).unwrap();
    let mut sampler = EpisodeSampler::new(&data, EpisodeSpec { way: 2, shot: 2, query: 2 }, 0).unwrap();
    trainer.run_epoch(&data, &mut sampler, tc.lr0).unwrap();
    for (name, p) in before.iter() {
        let after = &trainer.encoder.params.get(name).unwrap().tensor;
        let same = after.data().iter().zip(p.tensor.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if p.trainable {
            assert!(!same || name.ends_with("bias"), "{name} never moved");
        } else {
            assert!(same, "frozen {name} changed");
        }
    }
}

#[test]
fn checkpoint_file_round_trip_preserves_embeddings() {
    let enc = Encoder::new(small_conv(16, 2, 4, 8), 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    Checkpoint::new(enc.clone(), 12).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.seed, 12);
    assert_eq!(loaded.encoder, enc);
    let img = Tensor::full([1, 16, 16], 0.3);
    assert_eq!(loaded.encoder.encode_convnet(&img).unwrap(), enc.encode_convnet(&img).unwrap());
}
