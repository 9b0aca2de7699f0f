mod common;

use grnc::codec::{
    build_model, compress, decompress, read_checkpoint, save_checkpoint, ArchitectureConfig,
    CodecModel, ParamKind, ReconstructionMode,
};
use grnc::Tensor;

fn narrowed(seed: u64) -> CodecModel {
    build_model(&ArchitectureConfig::narrowed(16).unwrap(), seed).unwrap()
}

fn zero_convs(model: &mut CodecModel) {
    for p in model.params_mut() {
        if matches!(p.kind, ParamKind::ConvWeight | ParamKind::ConvBias) {
            p.tensor.data_mut().fill(0.0);
        }
    }
}

#[test]
fn default_model_code_and_output_shapes() {
    let model = build_model(&ArchitectureConfig::default(), 0).unwrap();
    let x = common::synthetic_image(1, 32, 32);
    let trace = compress(&model, &x, 2, ReconstructionMode::OneShot).unwrap();
    for c in &trace.codes {
        assert_eq!(c.shape(), &[1, 38, 2, 2]);
        assert!(c.data().iter().all(|&v| v == 1.0 || v == -1.0));
    }
    for r in &trace.reconstructions {
        assert_eq!(r.shape(), &[1, 3, 32, 32]);
        assert!(r.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn zero_model_emits_plus_one_and_mid_grey() {
    let mut model = narrowed(0);
    zero_convs(&mut model);
    let x = common::synthetic_image(2, 32, 48);
    let one = compress(&model, &x, 3, ReconstructionMode::OneShot).unwrap();
    for c in &one.codes {
        assert!(c.data().iter().all(|&v| v == 1.0));
    }
    for r in &one.reconstructions {
        assert!(r.data().iter().all(|&v| v == 0.5));
    }
    let add = compress(&model, &x, 3, ReconstructionMode::Additive).unwrap();
    for (r, res) in add.reconstructions.iter().zip(&add.residuals) {
        assert!(r.data().iter().all(|&v| v == 0.0));
        assert_eq!(res, &x);
    }
}

#[test]
fn compression_is_deterministic() {
    let x = common::synthetic_image(3, 48, 32);
    let a = compress(&narrowed(4), &x, 3, ReconstructionMode::Additive).unwrap();
    let b = compress(&narrowed(4), &x, 3, ReconstructionMode::Additive).unwrap();
    assert_eq!(a.codes, b.codes);
    assert_eq!(a.reconstructions, b.reconstructions);
    let c = compress(&narrowed(5), &x, 3, ReconstructionMode::Additive).unwrap();
    assert_ne!(a.reconstructions, c.reconstructions);
}

#[test]
fn first_iteration_differs_only_by_offset() {
    let model = narrowed(6);
    let x = common::synthetic_image(4, 32, 32);
    let one = compress(&model, &x, 1, ReconstructionMode::OneShot).unwrap();
    let add = compress(&model, &x, 1, ReconstructionMode::Additive).unwrap();
    assert_eq!(one.codes, add.codes);
    assert_eq!(one.decoded, add.decoded);
    let d = &one.decoded[0];
    assert_eq!(one.reconstructions[0], d.add_scalar(0.5).clamp(0.0, 1.0));
    assert_eq!(add.reconstructions[0], d.clamp(0.0, 1.0));
}

#[test]
fn residual_recurrences_hold() {
    let model = narrowed(7);
    let x = common::synthetic_image(5, 32, 32);
    for mode in [ReconstructionMode::OneShot, ReconstructionMode::Additive] {
        let tr = compress(&model, &x, 4, mode).unwrap();
        for t in 1..=4 {
            assert_eq!(tr.residual(t), &x.sub(&tr.reconstruction(t)).unwrap());
            let d = &tr.decoded[t - 1];
            let want = match mode {
                ReconstructionMode::OneShot => d.add_scalar(0.5),
                ReconstructionMode::Additive => tr.reconstruction(t - 1).add(d).unwrap(),
            }
            .clamp(0.0, 1.0);
            assert_eq!(tr.reconstruction(t), want, "{mode} t={t}");
        }
    }
}

#[test]
fn decoding_a_prefix_matches_the_encoder_view() {
    let model = narrowed(8);
    let x = common::synthetic_image(6, 32, 32);
    for mode in [ReconstructionMode::OneShot, ReconstructionMode::Additive] {
        let tr = compress(&model, &x, 4, mode).unwrap();
        for k in 1..=4 {
            assert_eq!(decompress(&model, &tr.codes[..k], mode).unwrap(), tr.reconstruction(k));
        }
    }
}

#[test]
fn checkpoint_reload_codes_identically() {
    let model = narrowed(9);
    let back = read_checkpoint(&save_checkpoint(&model)).unwrap();
    let x = common::synthetic_image(7, 32, 32);
    let a = compress(&model, &x, 2, ReconstructionMode::OneShot).unwrap();
    let b = compress(&back, &x, 2, ReconstructionMode::OneShot).unwrap();
    assert_eq!(a.codes, b.codes);
}

#[test]
fn rejects_unpadded_and_grey_input() {
    let model = narrowed(0);
    assert!(compress(&model, &Tensor::zeros(&[1, 3, 20, 32]), 1, ReconstructionMode::OneShot).is_err());
    assert!(compress(&model, &Tensor::zeros(&[1, 1, 32, 32]), 1, ReconstructionMode::OneShot).is_err());
    assert!(compress(&model, &Tensor::zeros(&[1, 3, 32, 32]), 0, ReconstructionMode::OneShot).is_err());
}
