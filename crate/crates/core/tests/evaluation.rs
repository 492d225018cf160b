use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use concept_insert::evaluation::{
    self, build_report, editing_success_rate, masked_image_alignment, Clients, EditingPromptList, EsrSample,
    FixedJudge, HumanVerdicts, ImageEmbedder, Metric, MetricKind, MockClip, MockDino, MockPerceptual, Region,
    TextAlignmentJudge, TextEmbedder,
};
use concept_insert::image::RgbImage;
use concept_insert::inference::{DeltaMerge, SampleSidecar, SlotBinding};
use concept_insert::latent::SpatialMap;
use concept_insert::masks::save_mask;
use concept_insert::Result;

const RED: [f64; 3] = [1.0, 0.0, 0.0];
const GREEN: [f64; 3] = [0.0, 1.0, 0.0];
const BLUE: [f64; 3] = [0.0, 0.0, 1.0];
const YELLOW: [f64; 3] = [1.0, 1.0, 0.0];
const PROMPT: &str = "a photo of * dog wearing a red hat";

fn halves(left: [f64; 3], right: [f64; 3]) -> RgbImage {
    let mut img = RgbImage::filled(8, 8, right);
    for y in 0..8 {
        for x in 0..4 {
            img.set_pixel(y, x, left);
        }
    }
    img
}

fn left_mask() -> SpatialMap {
    SpatialMap::new(8, 8, (0..64).map(|i| if i % 8 < 4 { 1.0 } else { 0.0 }).collect()).unwrap()
}

/// Average colour for images; a fixed table for texts.
struct TableClip;

impl ImageEmbedder for TableClip {
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        MockClip.embed_image(image)
    }
}

impl TextEmbedder for TableClip {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(match text {
            "a photo of dog wearing a red hat" => RED.to_vec(),
            _ => BLUE.to_vec(),
        })
    }
}

fn write_sample(dir: &Path, index: usize, image: &RgbImage, mask: bool) {
    let stem = format!("sample_{index:03}");
    image.save(&dir.join(format!("{stem}.png"))).unwrap();
    if mask {
        save_mask(&left_mask(), &dir.join(format!("{stem}_mask.png"))).unwrap();
    }
    let sidecar = SampleSidecar {
        prompt: PROMPT.into(),
        request_seed: 0,
        sample_seed: index as u64,
        sample_index: index,
        steps: 50,
        samples: 2,
        backbone_id: "toy".into(),
        checkpoint_ids: vec!["dog".into()],
        bindings: vec![SlotBinding {
            position: 4,
            slot_word: "dog".into(),
            concept_id: "dog".into(),
            class_word: "dog".into(),
            source_image: Some("source.png".into()),
            source_mask: Some("source_mask.png".into()),
        }],
        delta_merge: DeltaMerge::None,
        warnings: vec![],
    };
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&sidecar).unwrap()).unwrap();
}

/// Source: red left (foreground), blue right. Sample 0 equals the source;
/// sample 1 is yellow left, green right.
fn fixture_run(dir: &Path, masks: bool) {
    halves(RED, BLUE).save(&dir.join("source.png")).unwrap();
    save_mask(&left_mask(), &dir.join("source_mask.png")).unwrap();
    write_sample(dir, 0, &halves(RED, BLUE), masks);
    write_sample(dir, 1, &halves(YELLOW, GREEN), masks);
}

fn all() -> BTreeSet<MetricKind> {
    MetricKind::ALL.into_iter().collect()
}

fn value(m: &Metric) -> f64 {
    m.value().unwrap_or_else(|| panic!("metric skipped: {m:?}"))
}

#[test]
fn fixture_run_matches_hand_table() {
    let dir = tempfile::tempdir().unwrap();
    fixture_run(dir.path(), true);
    let verdicts = BTreeMap::from([
        ("sample_000".to_string(), BTreeMap::from([("hat".to_string(), true)])),
        ("sample_001".to_string(), BTreeMap::from([("hat".to_string(), false)])),
    ]);
    let judge = HumanVerdicts {
        verdicts,
        fallback: None,
    };
    let clients = Clients {
        clip: Some(&TableClip),
        dino: Some(&MockDino),
        perceptual: Some(&MockPerceptual),
        judge: Some(&judge),
    };
    let r = build_report(dir.path(), &clients, &EditingPromptList::default_list(), &all()).unwrap();

    // Foreground, average colour after blackout: sample 0 (0.5,0,0) vs
    // source (0.5,0,0) -> 1; sample 1 (0.5,0.5,0) -> 1/sqrt 2.
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let expected = [
        (MetricKind::ClipIF, (1.0 + s) / 2.0),
        // background: blue vs blue -> 1, green vs blue -> 0
        (MetricKind::ClipIB, 0.5),
        // quadrant vectors: same pattern as the averages
        (MetricKind::DinoF, (1.0 + s) / 2.0),
        (MetricKind::DinoB, 0.5),
        // text -> red: (0.5,0,0.5) gives 1/sqrt 2, (0.5,1,0) gives 1/sqrt 5
        (MetricKind::ClipT, (s + 1.0 / 5f64.sqrt()) / 2.0),
        // per-pixel channel means: 1/3 on the left, 2/3 on the right
        (MetricKind::Div, 0.5),
        (MetricKind::Esr, 0.5),
    ];
    for (k, want) in expected {
        let got = value(r.metric(k));
        assert!((got - want).abs() < 1e-9, "{k}: {got} vs {want}");
    }
    assert_eq!(r.sample_count, 2);
    assert_eq!(r.prompt_list_id, "default-v1");
    assert!(r.notes.default_protocol);
    assert_eq!(r.notes.esr.unwrap().judged, 2);

    let out = tempfile::tempdir().unwrap();
    evaluation::write_bundle(out.path(), &[("fixture".into(), r)]).unwrap();
    let csv = std::fs::read_to_string(out.path().join("report.csv")).unwrap();
    assert_eq!(
        csv.lines().nth(1).unwrap(),
        "fixture,0.853553,0.500000,0.853553,0.500000,0.577160,0.500000,0.500000,2"
    );
}

#[test]
fn missing_masks_and_clients_skip_with_reasons() {
    let dir = tempfile::tempdir().unwrap();
    fixture_run(dir.path(), false);
    let clients = Clients {
        clip: Some(&MockClip),
        ..Clients::default()
    };
    let r = build_report(dir.path(), &clients, &EditingPromptList::default_list(), &all()).unwrap();
    for k in [MetricKind::ClipIF, MetricKind::ClipIB] {
        assert!(matches!(r.metric(k), Metric::Skipped { reason } if reason.contains("no mask")));
    }
    assert!(matches!(&r.dino_f, Metric::Skipped { reason } if reason.contains("dino")));
    assert!(matches!(&r.div, Metric::Skipped { reason } if reason.contains("perceptual")));
    assert!(r.clip_t.value().is_some());
}

#[test]
fn selection_limits_columns() {
    let dir = tempfile::tempdir().unwrap();
    fixture_run(dir.path(), true);
    let judge = FixedJudge(true);
    let clients = Clients {
        clip: Some(&MockClip),
        dino: Some(&MockDino),
        perceptual: Some(&MockPerceptual),
        judge: Some(&judge),
    };
    let sel = evaluation::parse_metrics("div,esr").unwrap();
    let r = build_report(dir.path(), &clients, &EditingPromptList::default_list(), &sel).unwrap();
    for k in MetricKind::ALL {
        assert_eq!(r.metric(k).value().is_some(), sel.contains(&k), "{k}");
    }
}

#[test]
fn empty_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let clients = Clients::default();
    assert!(build_report(dir.path(), &clients, &EditingPromptList::default_list(), &all()).is_err());
}

#[test]
fn identical_samples_have_zero_diversity() {
    let dir = tempfile::tempdir().unwrap();
    halves(RED, BLUE).save(&dir.path().join("source.png")).unwrap();
    save_mask(&left_mask(), &dir.path().join("source_mask.png")).unwrap();
    for i in 0..3 {
        write_sample(dir.path(), i, &halves(GREEN, YELLOW), true);
    }
    let clients = Clients {
        perceptual: Some(&MockPerceptual),
        ..Clients::default()
    };
    let r = build_report(dir.path(), &clients, &EditingPromptList::default_list(), &all()).unwrap();
    assert_eq!(r.div, Metric::Value { raw: 0.0, value: 0.0 });
}

#[test]
fn success_rate_is_monotone_in_threshold() {
    let images: Vec<RgbImage> = [RED, GREEN, BLUE, YELLOW, [0.8, 0.2, 0.3], [0.3, 0.3, 0.3]]
        .iter()
        .enumerate()
        .map(|(i, &c)| halves(c, [0.1 * i as f64, 0.5, 0.2]))
        .collect();
    let list = EditingPromptList::default_list();
    let samples: Vec<EsrSample<'_>> = images
        .iter()
        .zip(list.prompts.iter().cycle())
        .enumerate()
        .map(|(i, (img, p))| EsrSample {
            id: format!("s{i}"),
            image: img,
            targets: &p.targets,
        })
        .collect();
    let rates: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 0.95]
        .iter()
        .map(|&threshold| {
            let judge = TextAlignmentJudge {
                embedder: &MockClip,
                threshold,
            };
            editing_success_rate(&samples, &judge).rate().unwrap()
        })
        .collect();
    assert!(rates.windows(2).all(|w| w[1] <= w[0]), "{rates:?}");
    assert!(rates[0] > rates[4], "{rates:?}");
}

#[test]
fn masked_similarity_is_symmetric_and_bounded() {
    let a = halves(RED, BLUE);
    let b = halves(YELLOW, GREEN);
    let m = left_mask();
    for region in [Region::Foreground, Region::Background] {
        let ab = masked_image_alignment(&a, &b, &m, &m, region, &MockDino).unwrap().raw;
        let ba = masked_image_alignment(&b, &a, &m, &m, region, &MockDino).unwrap().raw;
        assert!((ab - ba).abs() < 1e-15);
        assert!((-1.0..=1.0).contains(&ab));
        let aa = masked_image_alignment(&a, &a, &m, &m, region, &MockDino).unwrap();
        assert!((aa.raw - 1.0).abs() < 1e-12);
    }
}
