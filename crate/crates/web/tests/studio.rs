use rln2_core::ImagePlane;
use rln2_web::{Frame, LightControl, Scene};

fn two_lights() -> Vec<LightControl> {
    LightControl::parse_flat(&[20.0, 0.8, 0.8, 30.0, 45.0, 210.0, 0.8, 0.8, 200.0, 45.0]).unwrap()
}

fn pixel(f: &Frame, y: usize, x: usize) -> [u8; 4] {
    let p = f.pixels();
    let o = (y * f.width() + x) * 4;
    [p[o], p[o + 1], p[o + 2], p[o + 3]]
}

#[test]
fn row_places_panels_left_to_right() {
    let a = ImagePlane::filled(4, 3, 3, 1.0).unwrap();
    let b = ImagePlane::filled(4, 2, 1, 0.0).unwrap();
    let f = Frame::row(&[a, b]);
    assert_eq!((f.width(), f.height()), (3 + 4 + 2, 4));
    assert_eq!(pixel(&f, 0, 0), [255, 255, 255, 255]);
    assert_eq!(pixel(&f, 3, 7), [0, 0, 0, 255]);
    assert_eq!(pixel(&f, 1, 4), [24, 24, 24, 255]);
}

#[test]
fn views_need_a_render_first() {
    let mut s = Scene::new(3, 64).unwrap();
    assert!(s.guidance("hsv").is_err());
    let f = s.relight(&two_lights(), true).unwrap();
    assert_eq!((f.width(), f.height()), (3 * 64 + 8, 64));
    assert_eq!(f.pixels().len(), f.width() * f.height() * 4);
    assert_eq!(s.guidance("hsv").unwrap().width(), 3 * 64 + 8);
    assert_eq!(s.guidance("retinex").unwrap().width(), 2 * 64 + 4);
    assert_eq!(s.guidance("lab").unwrap().width(), 3 * 64 + 8);
    assert!(s.guidance("yuv").is_err());
}

#[test]
fn relighting_is_deterministic_and_light_dependent() {
    let mut a = Scene::new(5, 64).unwrap();
    let mut b = Scene::new(5, 64).unwrap();
    let lights = two_lights();
    assert_eq!(a.relight(&lights, true).unwrap(), b.relight(&lights, true).unwrap());
    let mut other = lights.clone();
    other[0].hue = 120.0;
    assert_ne!(a.relight(&lights, true).unwrap(), b.relight(&other, true).unwrap());
}

#[test]
fn subband_mosaic_covers_the_image() {
    let mut s = Scene::new(1, 64).unwrap();
    s.relight(&two_lights(), false).unwrap();
    for levels in 1..=3 {
        let f = s.subbands(levels, 3.0).unwrap();
        assert_eq!((f.width(), f.height()), (64, 64));
    }
    assert!(s.subbands(0, 1.0).is_err());
    assert!(s.subbands(7, 1.0).is_err());
}

#[test]
fn bad_light_values_are_rejected() {
    assert!(LightControl::parse_flat(&[1.0, 2.0]).is_err());
    let mut s = Scene::new(1, 32).unwrap();
    let weak = LightControl { hue: 0.0, saturation: 0.5, intensity: 0.1, azimuth: 0.0, elevation: 45.0 };
    assert!(s.relight(&[weak], true).is_err());
    assert!(s.relight(&[], true).is_err());
}
