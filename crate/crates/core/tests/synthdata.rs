use std::fs;

use rln2_core::colorspace::rgb_to_hsv;
use rln2_core::synthdata::io::{load_dataset, load_split, quantize, write_image, write_sample, GT_DIR, INPUT_DIR};
use rln2_core::synthdata::{generate_scene, render_triplet, DatasetSpec, LightSpec, RenderOptions, SceneGeometry, Split};
use rln2_core::{Error, ImagePlane};

#[test]
fn single_red_light_on_white_plane() {
    let geom = SceneGeometry::flat(32, 32, [0.9, 0.9, 0.9]).unwrap();
    let red = LightSpec::new([0.3, -0.2, 1.0], 0.8, 0.0, 1.0).unwrap();
    let t = render_triplet(&geom, &[red], 0.8, RenderOptions::default()).unwrap();
    // Lambertian by hand: albedo · rgb · cos(n, d) with n = +z.
    let cos = 1.0 / (0.3f64 * 0.3 + 0.2 * 0.2 + 1.0).sqrt();
    let expect = [0.9 * 0.8 * cos, 0.0, 0.0];
    for (c, &e) in t.color_lit.pixel(7, 19).iter().zip(&expect) {
        assert!((c - e).abs() < 1e-12, "{c} vs {e}");
    }
    let hsv = rgb_to_hsv(&t.color_lit).unwrap();
    assert!(hsv.value.iter().all(|&v| v > 0.0));
    assert!(hsv.hue.iter().all(|&h| h.min(360.0 - h) < 1e-9));
}

/// Separate clusters in the 15° hue histogram of saturated pixels. A bin
/// is occupied above 5% of the tallest one; up to two empty bins in a row
/// do not split a cluster.
fn hue_modes(img: &ImagePlane) -> usize {
    const BINS: usize = 24;
    let hsv = rgb_to_hsv(img).unwrap();
    let mut hist = [0usize; BINS];
    for (h, s) in hsv.hue.iter().zip(&hsv.saturation) {
        if *s > 0.15 {
            hist[(h / 15.0) as usize % BINS] += 1;
        }
    }
    let peak = *hist.iter().max().unwrap();
    let occupied: Vec<bool> = hist.iter().map(|&n| n * 20 >= peak && n > 0).collect();
    let Some(first) = occupied.iter().position(|&o| o) else { return 0 };
    // Walk the circle once from an occupied bin, counting long gaps.
    let (mut clusters, mut gap) = (0, 0);
    for k in 1..=BINS {
        if occupied[(first + k) % BINS] {
            if gap > 2 {
                clusters += 1;
            }
            gap = 0;
        } else {
            gap += 1;
        }
    }
    clusters.max(1)
}

#[test]
fn two_hued_lights_split_the_hue_histogram() {
    let lights = [
        LightSpec::new([0.9, 0.0, 0.35], 1.0, 0.0, 1.0).unwrap(),
        LightSpec::new([-0.9, 0.0, 0.35], 1.0, 200.0, 1.0).unwrap(),
    ];
    for seed in 0..12 {
        let geom = generate_scene(seed, 64, 64).unwrap();
        let t = render_triplet(&geom, &lights, 0.8, RenderOptions::default()).unwrap();
        let (lit, amb) = (hue_modes(&t.color_lit), hue_modes(&t.ambient));
        assert!(lit >= 2, "seed {seed}: colour-lit hue histogram has {lit} modes");
        assert_eq!(amb, 1, "seed {seed}: ambient hue histogram");
    }
}

#[test]
fn shadows_only_darken() {
    let mut darker = 0;
    for seed in 0..3 {
        let geom = generate_scene(seed, 48, 48).unwrap();
        let lights = [
            LightSpec::new([0.9, 0.2, 0.4], 0.9, 40.0, 0.8).unwrap(),
            LightSpec::new([-0.3, 0.9, 0.5], 0.6, 250.0, 0.5).unwrap(),
        ];
        let lit = render_triplet(&geom, &lights, 0.8, RenderOptions::default()).unwrap();
        let open = render_triplet(&geom, &lights, 0.8, RenderOptions { shadows: false, ..RenderOptions::default() }).unwrap();
        for (s, o) in lit.color_lit.data().iter().zip(open.color_lit.data()) {
            assert!(s <= o, "{s} > {o}");
            darker += usize::from(s < o);
        }
    }
    assert!(darker > 0, "no pixel was shadowed");
}

#[test]
fn same_parameters_render_identical_triplets() {
    let geom = generate_scene(17, 40, 40).unwrap();
    let lights = [LightSpec::new([0.2, 0.5, 0.8], 0.7, 300.0, 0.9).unwrap()];
    let a = render_triplet(&geom, &lights, 0.8, RenderOptions::default()).unwrap();
    let b = render_triplet(&generate_scene(17, 40, 40).unwrap(), &lights, 0.8, RenderOptions::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn dump_of_ten_reloads_in_listing_order() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec { scenes: 10, height: 32, width: 32, train_ratio: 1.0, val_ratio: 0.0, ..DatasetSpec::default() };
    let samples = spec.generate().unwrap();
    // Written in reverse so that the loader has to sort.
    for s in samples.iter().rev() {
        write_sample(dir.path(), s).unwrap();
    }
    let mut listing: Vec<String> = fs::read_dir(dir.path().join("train").join(INPUT_DIR))
        .unwrap()
        .map(|e| e.unwrap().path().file_stem().unwrap().to_string_lossy().into_owned())
        .collect();
    listing.sort();
    let loaded = load_split(dir.path(), Split::Train).unwrap();
    let ids: Vec<String> = loaded.iter().map(|t| t.id()).collect();
    assert_eq!(ids.len(), 10);
    assert_eq!(ids, listing);
    for (t, s) in loaded.iter().zip(&samples) {
        assert_eq!(t.id(), s.triplet.id());
        assert_eq!(t.color_lit, quantize(&s.triplet.color_lit));
        assert_eq!(t.ambient, quantize(&s.triplet.ambient));
        assert_eq!(t.lights.len(), s.triplet.lights.len());
    }
}

#[test]
fn loader_integrity_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path(), Split::Val), Err(Error::Integrity(_))));
    fs::create_dir_all(dir.path().join("val")).unwrap();
    assert_eq!(load_dataset(dir.path(), Split::Val).unwrap().count(), 0);

    let spec = DatasetSpec { scenes: 3, height: 32, width: 32, train_ratio: 1.0, val_ratio: 0.0, ..DatasetSpec::default() };
    let samples = spec.generate().unwrap();
    for s in &samples {
        write_sample(dir.path(), s).unwrap();
    }
    let split = dir.path().join("train");
    let victim = samples[1].triplet.id();
    fs::remove_file(split.join(GT_DIR).join(format!("{victim}.png"))).unwrap();
    match load_split(dir.path(), Split::Train) {
        Err(Error::Integrity(msg)) => assert!(msg.contains(&victim), "{msg}"),
        other => panic!("expected an integrity error, got {other:?}"),
    }

    let small = ImagePlane::filled(16, 16, 3, 0.5).unwrap();
    write_image(&split.join(GT_DIR).join(format!("{victim}.png")), &small).unwrap();
    assert!(matches!(load_split(dir.path(), Split::Train), Err(Error::Integrity(_))));
}
