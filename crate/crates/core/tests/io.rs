use deepgrasp::detection::Scorer;
use deepgrasp::net::io::{load_model, load_model_expecting, save_model};
use deepgrasp::net::{init_params, LayerSizes};
use deepgrasp::patch::ModalityMask;
use deepgrasp::rgbd::cornell::{load_cornell, save_scenes};
use deepgrasp::rgbd::synth::{synth_suite, SynthSpec};
use deepgrasp::rgbd::Channel;
use deepgrasp::training::build_dataset;

#[test]
fn saved_model_scores_identically() {
    let scenes = synth_suite(60, 2, &SynthSpec::default()).unwrap();
    let side = 10;
    let groups = vec![vec![Channel::Depth], vec![Channel::Y, Channel::U, Channel::V], vec![
        Channel::NormalX,
        Channel::NormalY,
        Channel::NormalZ,
    ]];
    let modality = ModalityMask::channel_groups(side, &groups).unwrap();
    let (input, _) = build_dataset(&scenes, side, modality, 1.5).unwrap();
    let net = init_params(4, LayerSizes::new(input.input_len(), 7, 5), input).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.model");
    save_model(&net, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, net);
    let rects: Vec<_> = scenes[0].labeled_rects().map(|(r, _)| r).collect();
    let a = net.logits(&scenes[0].image, &rects).unwrap();
    let b = back.logits(&scenes[0].image, &rects).unwrap();
    assert_eq!(a, b);
    let err = load_model_expecting(&path, 7 * 24 * 24).unwrap_err().to_string();
    assert!(err.contains("4032") && err.contains("700"), "{err}");
}

#[test]
fn synthetic_scenes_survive_the_dataset_layout() {
    let scenes = synth_suite(61, 3, &SynthSpec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_scenes(dir.path(), &scenes).unwrap();
    let back = load_cornell(dir.path()).unwrap();
    assert_eq!(back.len(), scenes.len());
    for (a, b) in scenes.iter().zip(&back) {
        assert_eq!((a.image_id, a.object_id), (b.image_id, b.object_id));
        assert_eq!((a.image.width(), a.image.height()), (b.image.width(), b.image.height()));
        assert_eq!(a.positives.len(), b.positives.len());
        assert_eq!(a.negatives.len(), b.negatives.len());
        for (p, q) in a.positives.iter().zip(&b.positives) {
            assert!((p.cx - q.cx).abs() < 1e-3 && (p.cy - q.cy).abs() < 1e-3);
            assert!((p.len - q.len).abs() < 1e-3 && (p.wid - q.wid).abs() < 1e-3);
        }
        let depth_err = a
            .image
            .plane(Channel::Depth)
            .iter()
            .zip(b.image.plane(Channel::Depth))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(depth_err < 1e-6, "{depth_err}");
    }
}

#[test]
fn missing_dataset_names_the_path() {
    let err = load_cornell(std::path::Path::new("/no/such/grasp/dir")).unwrap_err().to_string();
    assert!(err.contains("/no/such/grasp/dir"), "{err}");
}
