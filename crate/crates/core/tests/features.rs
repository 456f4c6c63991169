use soh_core::data::QvProfile;
use soh_core::features::{
    extract_all, extract_features, ExtractionConfig, FeatureKind, FeatureLayout, PartialAreaMode, PartialAreaSpec,
    ProfileFeatures,
};
use soh_core::synth::{synth_dataset, synth_module_profile, AgingSpec, CellSpec, ChargeProtocol};

fn extract_ok(profiles: &[QvProfile], cfg: &ExtractionConfig) -> Vec<ProfileFeatures> {
    extract_all(profiles, cfg).into_iter().map(|r| r.unwrap()).collect()
}

/// Single cells aged over six checkpoints and charged at three C-rates.
fn cell_style_profiles() -> Vec<QvProfile> {
    let base = CellSpec::default();
    let rates = [0.2, 0.33, 0.5];
    let mut out = Vec::new();
    for cell in 0..4u64 {
        for t in 0..6u32 {
            let fade = 0.025 * t as f64 + 0.005 * cell as f64;
            let spec = base.aged(fade, 0.3);
            let c_rate = rates[(t as usize + cell as usize) % 3];
            let protocol = ChargeProtocol {
                current: c_rate * base.capacity,
                v_start: 3.40,
                v_end: 4.15,
                n_samples: 250,
                noise_sigma_v: 1e-3,
                temperature_c: 25.0,
            };
            let p = synth_module_profile(
                std::slice::from_ref(&spec),
                &protocol,
                100 * cell + t as u64,
                &format!("cell{cell}"),
                t,
                Some(1.0 - fade),
            )
            .unwrap();
            out.push(p);
        }
    }
    out
}

#[test]
fn cell_style_family_has_24_features() {
    let cfg = ExtractionConfig {
        partial_areas: vec![],
        ..ExtractionConfig::default()
    };
    let extracted = extract_ok(&cell_style_profiles(), &cfg);
    for p in &extracted {
        assert_eq!(p.extrema.peaks.len(), 3, "{}", p.id);
        assert_eq!(p.extrema.valleys.len(), 2, "{}", p.id);
    }
    let layout = FeatureLayout::from_reference(&extracted).unwrap();
    assert_eq!(layout.columns.len(), 24, "{:?}", layout.columns);
    assert!(layout.columns.contains(&"C_RATE".to_string()));
    assert!(!layout.columns.contains(&"TEMP".to_string()));
    let table = layout.assemble(&extracted).unwrap();
    assert!(table.is_fully_available());
}

fn module_style_aging() -> AgingSpec {
    AgingSpec {
        v_start: 3.63,
        v_end: 3.82,
        n_modules: 4,
        n_checkpoints: 6,
        ..AgingSpec::default()
    }
}

fn module_style_config() -> ExtractionConfig {
    ExtractionConfig {
        ic_valleys: false,
        dv_peaks: false,
        ic_areas: false,
        partial_areas: vec![
            PartialAreaSpec::window(0.025),
            PartialAreaSpec {
                mode: PartialAreaMode::CutoffLine { cutoff: 300.0 },
                target_peak: Some(1),
            },
        ],
        ..ExtractionConfig::default()
    }
}

#[test]
fn module_style_family_has_6_features() {
    let data = synth_dataset(&module_style_aging(), &CellSpec::default()).unwrap();
    let extracted = extract_ok(&data.profiles, &module_style_config());
    for p in &extracted {
        assert_eq!(p.extrema.peaks.len(), 1, "{}", p.id);
    }
    let layout = FeatureLayout::from_reference(&extracted).unwrap();
    assert_eq!(
        layout.columns,
        ["IC_PH_1", "IC_PL_1", "DV_VH_1", "DV_VL_1", "IC_PA_1", "IC_PA_2"]
    );
    assert!(layout.assemble(&extracted).unwrap().is_fully_available());
}

#[test]
fn curve_identities_hold_per_sample() {
    let aging = AgingSpec {
        n_modules: 3,
        n_checkpoints: 5,
        ..AgingSpec::default()
    };
    let data = synth_dataset(&aging, &CellSpec::default()).unwrap();
    for p in extract_ok(&data.profiles, &ExtractionConfig::default()) {
        let n_peaks = p.extrema.peaks.len();
        assert_eq!(n_peaks, 3, "{}", p.id);
        for k in 1..=n_peaks {
            let ph = p.get(FeatureKind::IcPh, k).unwrap();
            let vh = p.get(FeatureKind::DvVh, k).unwrap();
            assert!((ph * vh - 1.0).abs() < 1e-6);
        }
        let ar1 = p.get(FeatureKind::IcAr, 1).unwrap();
        let pl1 = p.get(FeatureKind::DvPl, 1).unwrap();
        assert!((ar1 - pl1).abs() < 1e-9 * ar1.abs().max(1.0));
        let total: f64 = (1..=n_peaks).map(|k| p.get(FeatureKind::IcAr, k).unwrap()).sum();
        let span = p.curve.charge_at(p.curve.v_range.1) - p.curve.charge_at(p.curve.v_range.0);
        assert!((total - span).abs() < 1e-9 * span);
        for w in p.extrema.peaks.windows(2) {
            assert!(w[0].location < w[1].location);
        }
        for (k, v) in p.extrema.valleys.iter().enumerate() {
            assert!(v.height < p.extrema.peaks[k].height && v.height < p.extrema.peaks[k + 1].height);
        }
    }
}

#[test]
fn extraction_is_deterministic_and_order_free() {
    let aging = AgingSpec {
        n_modules: 3,
        n_checkpoints: 4,
        ..AgingSpec::default()
    };
    let data = synth_dataset(&aging, &CellSpec::default()).unwrap();
    let cfg = ExtractionConfig::default();
    let a = extract_ok(&data.profiles, &cfg);
    let again = extract_features(&data.profiles[3], &cfg).unwrap();
    assert_eq!(again.features, a[3].features);

    let mut reversed = data.profiles.clone();
    reversed.reverse();
    let b = extract_ok(&reversed, &cfg);
    let la = FeatureLayout::from_reference(&a).unwrap();
    let lb = FeatureLayout::from_reference(&b).unwrap();
    assert_eq!(la, lb);
    let ta = la.assemble(&a).unwrap();
    let tb = lb.assemble(&b).unwrap();
    let n = ta.n_rows();
    for i in 0..n {
        assert_eq!(ta.ids()[i], tb.ids()[n - 1 - i]);
        assert_eq!(ta.rows()[i], tb.rows()[n - 1 - i]);
    }
}

#[test]
fn layout_masks_missing_features() {
    let aging = AgingSpec {
        n_modules: 2,
        n_checkpoints: 3,
        ..AgingSpec::default()
    };
    let data = synth_dataset(&aging, &CellSpec::default()).unwrap();
    let extracted = extract_ok(&data.profiles, &ExtractionConfig::default());
    let mut layout = FeatureLayout::from_reference(&extracted).unwrap();
    layout.columns.push("IC_PH_9".into());
    let table = layout.assemble(&extracted).unwrap();
    let j = table.column_index("IC_PH_9").unwrap();
    assert!(table.column(j).iter().all(Option::is_none));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("layout.toml");
    layout.write(&path).unwrap();
    assert_eq!(FeatureLayout::read(&path).unwrap(), layout);
    std::fs::write(&path, "n_peaks = 1\ncolumns = [\"IC_XX_1\"]").unwrap();
    assert!(FeatureLayout::read(&path).is_err());
}
