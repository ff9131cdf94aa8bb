use stainkit::networks::*;
use stainkit::nn::{Shape, Tape, Tensor};

fn ramp(shape: Shape) -> Tensor<f32> {
    let n = shape.numel();
    Tensor::from_vec(shape, (0..n).map(|i| (i % 97) as f32 / 96.0).collect()).unwrap()
}

fn small_gen(arch: GeneratorArch) -> GeneratorConfig {
    GeneratorConfig {
        arch,
        base_width: 4,
        n_blocks: 2,
        depth: 3,
    }
}

#[test]
fn generator_shapes_and_range() {
    for arch in [GeneratorArch::Resnet9, GeneratorArch::EgUnet] {
        let g = Generator::<f32>::build(&small_gen(arch), 3).unwrap();
        let y = g.infer(&ramp(Shape::new(2, 1, 16, 24))).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 3, 16, 24), "{arch:?}");
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn generator_rejects_bad_input() {
    let g = Generator::<f32>::build(&small_gen(GeneratorArch::Resnet9), 3).unwrap();
    assert!(g.infer(&ramp(Shape::new(1, 3, 16, 16))).is_err());
    assert!(g.infer(&ramp(Shape::new(1, 1, 18, 16))).is_err());
}

#[test]
fn builds_are_seed_deterministic() {
    let cfg = small_gen(GeneratorArch::Resnet9);
    let a = Generator::<f32>::build(&cfg, 11).unwrap();
    let b = Generator::<f32>::build(&cfg, 11).unwrap();
    let c = Generator::<f32>::build(&cfg, 12).unwrap();
    assert_eq!(a.params().checksum(), b.params().checksum());
    assert_ne!(a.params().checksum(), c.params().checksum());
}

#[test]
fn teacher_shapes() {
    let t = Teacher::<f32>::build(&TeacherConfig { base_width: 4, depth: 3 }, 1).unwrap();
    let y = t.infer(&ramp(Shape::new(1, 1, 16, 16))).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 3, 16, 16));
    assert!(t.infer(&ramp(Shape::new(1, 1, 12, 16))).is_err());
}

#[test]
fn critic_score_maps() {
    let cfg = DiscriminatorConfig {
        base_width: 4,
        global_layers: 2,
        local_layers: 1,
        patch_count: 3,
        patch_size: 8,
    };
    cfg.validate(16, 16).unwrap();
    let d = DiscriminatorPair::<f32>::build(&cfg, 5).unwrap();
    let x = ramp(Shape::new(2, 3, 16, 16));
    let mut t = Tape::new();
    let p = d.params().bind_frozen(&mut t);
    let xv = t.constant(x);
    let g = d.forward_global(&mut t, &p, xv).unwrap();
    let s = score_map_size(2, 16).unwrap();
    assert_eq!(t.shape(g), Shape::new(2, 1, s, s));
    let coords = d.sample_crops(2, 16, 16, 9).unwrap();
    assert_eq!(coords.len(), 6);
    let l = d.forward_local(&mut t, &p, xv, &coords).unwrap();
    let s = score_map_size(1, 8).unwrap();
    assert_eq!(t.shape(l), Shape::new(6, 1, s, s));
    assert!(DiscriminatorConfig::default().validate(32, 32).is_err());
}

#[test]
fn embedder_features() {
    let e = PerceptualEmbedder::<f32>::default_embedder();
    let feats = e.block_features(&ramp(Shape::new(2, 3, 32, 32))).unwrap();
    let widths: Vec<usize> = feats.iter().map(|f| f.shape().c).collect();
    assert_eq!(widths, e.config().widths.to_vec());
    assert_eq!(feats[4].shape().h, 2);
    let gray = ramp(Shape::new(1, 1, 16, 16));
    assert!(e.infer(&gray).is_ok());
    assert!(e.infer(&ramp(Shape::new(1, 1, 8, 8))).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let g = Generator::<f32>::build(&small_gen(GeneratorArch::EgUnet), 2).unwrap();
    let mut ck = Checkpoint::<f32>::new();
    ck.insert_params("generator", g.params());
    ck.set_meta("arch", g.arch_tag());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.safetensors");
    ck.save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.content_hash(), ck.content_hash());
    assert_eq!(std::fs::read(&path).unwrap(), ck.to_bytes().unwrap());

    let mut h = Generator::<f32>::build(&small_gen(GeneratorArch::EgUnet), 9).unwrap();
    back.restore_params("generator", h.params_mut()).unwrap();
    assert_eq!(h.params().checksum(), g.params().checksum());

    let other = Generator::<f32>::build(&small_gen(GeneratorArch::Resnet9), 2).unwrap();
    let mut other = other;
    assert!(back.restore_params("generator", other.params_mut()).is_err());
    assert!(matches!(
        Checkpoint::<f32>::load(dir.path().join("missing")),
        Err(stainkit::Error::Missing(_))
    ));
}
