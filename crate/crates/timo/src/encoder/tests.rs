use super::*;
use crate::attention::stga_oracle;
use crate::nn::learnable_count;
use crate::validate::{gradcheck_block, gradcheck_encoder, random_tensor, tiny_gradcheck_config};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn zeroed<E: Element, P: ParamVisit<E>>(mut p: P) -> P {
    p.visit_learnables_mut(&mut |d| {
        for v in d.value.data_mut() {
            *v = E::zero();
        }
    });
    p
}

#[test]
fn patch_embed_quarters_resolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let config = ModelConfig::tiny(10);
    let params = EncoderParams::<f64>::init(&config, &mut rng).unwrap();
    let x = random_tensor(&[3, 10, 64, 64], &mut rng);
    let (grid, _) = patch_embed(&x, &params).unwrap();
    assert_eq!(grid.t(), 3);
    assert_eq!(grid.np(), 16);
    assert_eq!(grid.dim(), 16);

    let x = random_tensor(&[2, 10, 32, 32], &mut rng);
    let (grid, _) = patch_embed(&x, &params).unwrap();
    assert_eq!(grid.np(), 8);
}

#[test]
fn patch_embed_zero_input_zero_bias_gives_zero_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let config = ModelConfig::tiny(2);
    let params = EncoderParams::<f64>::init(&config, &mut rng).unwrap();
    // init leaves conv biases at zero
    let x = Tensor::zeros(&[2, 2, 32, 32]);
    let (grid, _) = patch_embed(&x, &params).unwrap();
    assert!(grid.data().data().iter().all(|&v| v == 0.0));
}

#[test]
fn patch_embed_rejects_bad_geometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let config = ModelConfig::tiny(2);
    let params = EncoderParams::<f64>::init(&config, &mut rng).unwrap();
    assert!(patch_embed(&Tensor::<f64>::zeros(&[2, 2, 30, 30]), &params).is_err());
    assert!(patch_embed(&Tensor::<f64>::zeros(&[2, 2, 32, 16]), &params).is_err());
    assert!(patch_embed(&Tensor::<f64>::zeros(&[2, 3, 32, 32]), &params).is_err());
}

#[test]
fn downsample_follows_table_dims() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Base stage1→2: (T,16,128) → (T,8,256)
    let base = ModelConfig::base(3);
    let ds = Conv2dParams::<f64>::init(
        base.stages[0].dim,
        base.stages[1].dim,
        3,
        2,
        1,
        &mut rng,
    );
    let x = random_tensor(&[2, 128, 16, 16], &mut rng);
    let y = ds.forward_frames(&x).unwrap();
    assert_eq!(y.shape(), &[2, 256, 8, 8]);

    // Large stage2→3: (T,8,768) → (T,4,960); Table 1 overrides doubling
    let large = ModelConfig::large(3);
    assert_eq!(large.stages[2].dim, 960);
    let ds = Conv2dParams::<f64>::init(
        large.stages[1].dim,
        large.stages[2].dim,
        3,
        2,
        1,
        &mut rng,
    );
    let x = random_tensor(&[1, 768, 8, 8], &mut rng);
    let y = ds.forward_frames(&x).unwrap();
    assert_eq!(y.shape(), &[1, 960, 4, 4]);
}

#[test]
fn downsample_averaging_kernel_keeps_constant_interior() {
    // ones input, kernel = 1/(9·Cin): interior outputs are exactly 1
    let cin = 4;
    let mut ds = Conv2dParams::<f64>::zeros(cin, 2, 3, 2, 1);
    for v in ds.weight.value.data_mut() {
        *v = 1.0 / (9.0 * cin as f64);
    }
    let x = Tensor::filled(&[1, cin, 8, 8], 1.0);
    let y = ds.forward_frames(&x).unwrap();
    // output 4x4; positions not touching the zero padding see all 9 taps
    for oy in 1..3 {
        for ox in 1..3 {
            for co in 0..2 {
                let v = y.data()[((co) * 4 + oy) * 4 + ox];
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn block_with_zero_weights_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dim = 8;
    for kind in [AttnKind::Mhsa, AttnKind::Stga, AttnKind::Dstga] {
        let params = zeroed(BlockParams {
            norm1: LayerNormParams::identity(dim),
            attn: AttentionParams::<f64>::init(kind, dim, 2, &mut rng).unwrap(),
            norm2: LayerNormParams::identity(dim),
            ffn: FfnParams {
                fc1: LinearParams::init(dim, 4 * dim, &mut rng),
                fc2: LinearParams::init(4 * dim, dim, &mut rng),
            },
        });
        let x = crate::validate::random_grid(2, 2, dim, &mut rng);
        let (out, _) = block_forward(&x, &params, Mode::Eval).unwrap();
        for (a, b) in out.data().data().iter().zip(x.data().data()) {
            assert!((a - b).abs() < 1e-12, "{kind:?} residual identity broken");
        }
        assert_eq!(out.data().shape(), x.data().shape());
    }
}

#[test]
fn block_with_stga_matches_block_with_oracle_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dim = 8;
    let params = BlockParams {
        norm1: LayerNormParams::identity(dim),
        attn: AttentionParams::<f64>::init(AttnKind::Stga, dim, 2, &mut rng).unwrap(),
        norm2: LayerNormParams::identity(dim),
        ffn: FfnParams {
            fc1: LinearParams::init(dim, 4 * dim, &mut rng),
            fc2: LinearParams::init(4 * dim, dim, &mut rng),
        },
    };
    let x = crate::validate::random_grid(3, 2, dim, &mut rng);
    let (out, _) = block_forward(&x, &params, Mode::Eval).unwrap();

    // same block with the masked-full-attention oracle in place of stga
    let x_flat = x.to_flat();
    let (ln1_out, _) = params.norm1.forward_with_cache(&x_flat).unwrap();
    let ln1_grid = TokenGrid::from_flat(3, 2, dim, ln1_out).unwrap();
    let attn_out = stga_oracle(&ln1_grid, &params.attn).unwrap();
    let h = x_flat.add(&attn_out.to_flat()).unwrap();
    let (ln2_out, _) = params.norm2.forward_with_cache(&h).unwrap();
    let mid = gelu(&params.ffn.fc1.forward(&ln2_out).unwrap()).unwrap();
    let expect = h.add(&params.ffn.fc2.forward(&mid).unwrap()).unwrap();
    for (a, b) in out.data().data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn encoder_base_feature_pyramid_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let config = ModelConfig::base(10);
    let params = EncoderParams::<f64>::init(&config, &mut rng).unwrap();
    let x = random_tensor(&[3, 10, 64, 64], &mut rng);
    let (out, _) = encoder_forward(&x, &params, Mode::Eval).unwrap();
    let expect = [(16, 128), (8, 256), (4, 512), (2, 1024)];
    for (f, (np, d)) in out.features.iter().zip(expect) {
        assert_eq!(f.t(), 3);
        assert_eq!(f.np(), np);
        assert_eq!(f.dim(), d);
    }
}

#[test]
fn encoder_single_frame_and_token_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let config = ModelConfig::tiny(2);
    let params = EncoderParams::<f64>::init(&config, &mut rng).unwrap();
    let x1 = random_tensor(&[1, 2, 32, 32], &mut rng);
    let (out1, _) = encoder_forward(&x1, &params, Mode::Eval).unwrap();
    assert_eq!(out1.features[3].np(), 1);

    // doubling H,W quadruples every stage's token count
    let x2 = random_tensor(&[1, 2, 64, 64], &mut rng);
    let (out2, _) = encoder_forward(&x2, &params, Mode::Eval).unwrap();
    for (a, b) in out1.features.iter().zip(&out2.features) {
        assert_eq!(4 * a.num_tokens(), b.num_tokens());
    }
}

#[test]
fn encoder_forward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let config = tiny_gradcheck_config();
    let params = EncoderParams::<f64>::init(&config, &mut rng).unwrap();
    let x = random_tensor(&[2, 1, 32, 32], &mut rng);
    let (a, _) = encoder_forward(&x, &params, Mode::Eval).unwrap();
    let (b, _) = encoder_forward(&x, &params, Mode::Eval).unwrap();
    for (fa, fb) in a.features.iter().zip(&b.features) {
        assert_eq!(fa.data().data(), fb.data().data());
    }
}

#[test]
fn count_parameters_matches_instantiated_tiny_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for attn in ["M-M-M-M", "D-D-M-M", "S-D-S-D"] {
        let config = ModelConfig::tiny(5).with_attn_string(attn).unwrap();
        let params = EncoderParams::<f64>::init(&config, &mut rng).unwrap();
        let breakdown = count_parameters(&config);
        assert_eq!(
            breakdown.total as usize,
            learnable_count(&params),
            "closed form vs instantiation for {attn}"
        );
        let parts = breakdown.patch_embed
            + breakdown.stages.iter().sum::<u64>()
            + breakdown.downsamples;
        assert_eq!(parts, breakdown.total);
    }
}

#[test]
fn count_parameters_reproduces_published_sizes() {
    let targets = [
        (ModelConfig::base(3), 91_000_000u64),
        (ModelConfig::large(3), 298_000_000),
        (ModelConfig::huge(3), 675_000_000),
    ];
    for (config, target) in targets {
        let got = count_parameters(&config).total;
        let rel = (got as f64 - target as f64).abs() / target as f64;
        assert!(
            rel < 0.05,
            "{:?}: {} vs {} (rel {:.4})",
            config.variant,
            got,
            target,
            rel
        );
    }
}

#[test]
fn convert_mmmm_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let config = ModelConfig::tiny(2);
    let params = EncoderParams::<f64>::init(&config, &mut rng).unwrap();
    let converted = convert_for_finetune(&params, "M-M-M-M", &mut rng).unwrap();
    let mut before = Vec::new();
    params.visit_tensors("", &mut |n, t| before.push((n, t.clone())));
    let mut after = Vec::new();
    converted.visit_tensors("", &mut |n, t| after.push((n, t.clone())));
    assert_eq!(before.len(), after.len());
    for ((na, ta), (nb, tb)) in before.iter().zip(&after) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data());
    }
}

#[test]
fn convert_ddmm_adds_exactly_the_projection_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let config = ModelConfig::tiny(2);
    let params = EncoderParams::<f64>::init(&config, &mut rng).unwrap();
    let converted = convert_for_finetune(&params, "D-D-M-M", &mut rng).unwrap();
    let added = learnable_count(&converted) - learnable_count(&params);
    // per D-stage block: heads · (D'+1) linear params + 2 BN affine per head
    let mut expect = 0;
    for i in 0..2 {
        let s = &config.stages[i];
        expect += s.depth * s.heads * ((s.dim / s.heads + 1) + 2);
    }
    assert_eq!(added, expect);
    // reused attention weights are bitwise identical
    for (orig, conv) in params.stages[0].iter().zip(&converted.stages[0]) {
        assert_eq!(
            orig.attn.wq.weight.value.data(),
            conv.attn.wq.weight.value.data()
        );
    }
}

#[test]
fn convert_smmm_preserves_single_frame_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let config = ModelConfig::tiny(2);
    let params = EncoderParams::<f64>::init(&config, &mut rng).unwrap();
    let converted = convert_for_finetune(&params, "S-M-M-M", &mut rng).unwrap();
    let x = random_tensor(&[1, 2, 32, 32], &mut rng);
    let (a, _) = encoder_forward(&x, &params, Mode::Eval).unwrap();
    let (b, _) = encoder_forward(&x, &converted, Mode::Eval).unwrap();
    for (fa, fb) in a.features.iter().zip(&b.features) {
        for (x, y) in fa.data().data().iter().zip(fb.data().data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn convert_rejects_bad_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let config = ModelConfig::tiny(2);
    let params = EncoderParams::<f64>::init(&config, &mut rng).unwrap();
    assert!(convert_for_finetune(&params, "D-D-M", &mut rng).is_err());
    assert!(convert_for_finetune(&params, "D-D-M-X", &mut rng).is_err());
    let already = convert_for_finetune(&params, "S-M-M-M", &mut rng).unwrap();
    assert!(convert_for_finetune(&already, "D-M-M-M", &mut rng).is_err());
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let config = ModelConfig::tiny(2).with_attn_string("D-M-M-M").unwrap();
    let params = EncoderParams::<f64>::init(&config, &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.tmck");
    save_params(&params, &path).unwrap();

    let mut fresh = EncoderParams::<f64>::init(&config, &mut rng).unwrap();
    load_params(&mut fresh, &path).unwrap();
    let mut a = Vec::new();
    params.visit_tensors("", &mut |n, t| a.push((n, t.clone())));
    let mut b = Vec::new();
    fresh.visit_tensors("", &mut |n, t| b.push((n, t.clone())));
    for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b, "tensor {na} not bit-exact");
    }

    // structural mismatch is a schema error
    let other = ModelConfig::tiny(3);
    let mut wrong = EncoderParams::<f64>::init(&other, &mut rng).unwrap();
    assert!(load_params(&mut wrong, &path).is_err());
}

#[test]
fn checkpoint_names_follow_stage_block_scheme() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let config = ModelConfig::tiny(2);
    let params = EncoderParams::<f64>::init(&config, &mut rng).unwrap();
    let mut names = Vec::new();
    params.visit_tensors("", &mut |n, _| names.push(n));
    assert!(names.contains(&"patch_embed.conv1.weight".to_string()));
    assert!(names.contains(&"stage1.block0.attn.wq.weight".to_string()));
    assert!(names.contains(&"stage4.block0.ffn.fc2.bias".to_string()));
    assert!(names.contains(&"downsample3.weight".to_string()));
}

#[test]
fn gradcheck_block_all_kinds() {
    for (kind, seed) in [
        (AttnKind::Mhsa, 20),
        (AttnKind::Stga, 21),
        (AttnKind::Dstga, 22),
    ] {
        let err = gradcheck_block(kind, 2, 2, 4, 2, seed, 1e-5, Mode::Train).unwrap();
        assert!(err < 1e-6, "{kind:?}: rel err {err}");
    }
}

#[test]
fn gradcheck_two_block_tiny_encoder() {
    let err = gradcheck_encoder(2, 32, 30, 1e-5, Mode::Train).unwrap();
    assert!(err < 1e-4, "rel err {err}");
}
