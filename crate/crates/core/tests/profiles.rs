use setdino::encoder::{EncoderState, VitConfig};
use setdino::error::Error;
use setdino::profiles::{
    batch_gene_profiles, consensus_profiles, engineered_features, extract_engineered_profiles,
    extract_single_cell_profiles, guide_profiles, robust_normalize, ENGINEERED_DIM,
};
use setdino::store::{Normalization, PreprocessConfig, Preprocessor, RenderSource};
use setdino::synthgen::{generate_dataset, generate_world, param, render_params_image, DatasetConfig, WorldConfig};

fn source() -> RenderSource {
    let world = generate_world(
        &WorldConfig {
            n_genes: 5,
            guides_per_gene: 2,
            n_ntc_guides: 2,
            n_batches: 4,
            n_modules: 1,
            module_size: 2,
            image_size: 32,
            n_decoy_edges: 0,
            ..WorldConfig::default()
        },
        11,
    )
    .unwrap();
    let ds = generate_dataset(
        &world,
        &DatasetConfig {
            cells_per_guide_per_batch: 4,
            split: None,
        },
        11,
    )
    .unwrap();
    RenderSource::new(&ds)
}

#[test]
fn nucleus_area_scales_with_radius_squared() {
    let mut p = [0.0; param::COUNT];
    for (v, spec) in p.iter_mut().zip(param::SPEC) {
        *v = spec.0;
    }
    p[param::NUCLEUS_ELONGATION] = 0.0;
    p[param::NUCLEUS_RADIUS] = 8.0;
    let small = engineered_features(&render_params_image(&p, 64, 0.0, 5)).unwrap();
    p[param::NUCLEUS_RADIUS] = 12.0;
    let large = engineered_features(&render_params_image(&p, 64, 0.0, 5)).unwrap();
    let ratio = large[ENGINEERED_DIM - 2] / small[ENGINEERED_DIM - 2];
    assert!((ratio - 2.25).abs() <= 0.225, "area ratio {ratio}");
}

#[test]
fn learned_profiles_have_four_layers_of_class_tokens() {
    let src = source();
    let pre = Preprocessor::fit(&src, None, &PreprocessConfig::default(), 0).unwrap();
    let cfg = VitConfig {
        image_size: 16,
        patch_size: 8,
        embed_dim: 16,
        depth: 4,
        n_heads: 2,
        mlp_ratio: 2,
        n_prototypes: 8,
        projector_hidden_dim: 8,
        bottleneck_dim: 4,
    };
    let model = EncoderState::<f32>::init(&cfg, 1).unwrap();
    let a = extract_single_cell_profiles(&model, &src, &pre, None, "test").unwrap();
    assert_eq!(a.dim(), 64);
    assert_eq!(a.len(), src.cells.len());
    let b = extract_single_cell_profiles(&model, &src, &pre, None, "test").unwrap();
    assert_eq!(a, b);

    let bg = batch_gene_profiles(&a).unwrap();
    assert_eq!(bg.len(), (5 + 1) * 4);
    let cons = consensus_profiles(&bg).unwrap();
    assert_eq!(cons.len(), 5);
    let guides = guide_profiles(&a).unwrap();
    assert_eq!(guides.len(), (5 * 2 + 2) * 4);
}

#[test]
fn engineered_pipeline_normalises_per_batch() {
    let src = source();
    let pre = Preprocessor::fit(&src, None, &PreprocessConfig::default(), 0).unwrap();
    let t = extract_engineered_profiles(&src, &pre, None).unwrap();
    assert_eq!(t.dim(), ENGINEERED_DIM);
    let n = robust_normalize(&t).unwrap();
    assert_eq!(n.len(), t.len());
}

#[test]
fn missing_controls_are_reported() {
    let src = source();
    let cfg = PreprocessConfig {
        normalization: Normalization::NtcZScore,
        ..PreprocessConfig::default()
    };
    let targeting: Vec<usize> = (0..src.cells.len()).filter(|&r| !src.cells[r].is_ntc()).collect();
    assert!(matches!(
        Preprocessor::fit(&src, Some(&targeting), &cfg, 0),
        Err(Error::MissingControls(_))
    ));
}
