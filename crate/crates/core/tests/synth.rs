use std::collections::BTreeSet;
use std::path::Path;

use mvreid::synth::*;
use mvreid::View;
use proptest::prelude::*;

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_config(seed: u64) -> DatasetConfig {
    DatasetConfig {
        train_ids: 3,
        database_ids: 2,
        test_ids: 2,
        train_groups: 2,
        database_groups: 2,
        test_groups: 1,
        image_size: 24,
        ..DatasetConfig::desk(seed)
    }
}

#[test]
fn identity_generation_is_deterministic_and_distinct() {
    assert_eq!(generate_identity(5, 9), generate_identity(5, 9));
    let (a, b) = (generate_identity(1, 9), generate_identity(2, 9));
    assert_ne!(a.frontal_blobs, b.frontal_blobs);
    assert_ne!(a.profile_blobs, b.profile_blobs);
    assert_ne!(generate_identity(1, 9), generate_identity(1, 10));
    for id in 0..20 {
        let s = generate_identity(id, 3);
        assert_ne!(s.frontal_blobs, s.profile_blobs);
        assert!(s.blobs(View::Frontal).iter().all(|b| b.radius > 0.0));
    }
}

#[test]
fn plain_render_uses_only_part_colours() {
    let mut spec = generate_identity(3, 1);
    spec.frontal_blobs.clear();
    spec.profile_blobs.clear();
    for view in View::ALL {
        let img = render_view(&spec, view, &RenderConfig { size: 48, noise_std: 0.0 }, 0).unwrap();
        let colours: BTreeSet<[u8; 3]> = (0..48).flat_map(|y| (0..48).map(move |x| (x, y))).map(|(x, y)| img.pixel(x, y)).collect();
        assert!(colours.contains(&spec.coat));
        assert!(colours.len() <= 5, "{view}: {colours:?}");
        let coat = img.data().chunks(3).filter(|p| *p == spec.coat).count();
        assert!(coat > 48 * 48 / 5);
    }
    assert!(render_view(&spec, View::Frontal, &RenderConfig::new(15), 0).is_err());
}

#[test]
fn render_noise_is_seeded_and_small() {
    let spec = generate_identity(4, 2);
    let cfg = RenderConfig::new(40);
    let a = render_view(&spec, View::Profile, &cfg, 1).unwrap();
    assert_eq!(a, render_view(&spec, View::Profile, &cfg, 1).unwrap());
    let b = render_view(&spec, View::Profile, &cfg, 2).unwrap();
    let d = a.mean_abs_diff(&b).unwrap();
    assert!(d > 1.0 && d < 2.0 * cfg.noise_std, "{d}");
}

#[test]
fn views_differ_more_than_augmentations() {
    let cfg = RenderConfig::new(40);
    let aug = AugmentConfig::training(40);
    let (mut inter, mut intra) = (0.0, 0.0);
    for id in 0..20 {
        let spec = generate_identity(id, 7);
        let f = render_view(&spec, View::Frontal, &cfg, 1).unwrap();
        let p = render_view(&spec, View::Profile, &cfg, 2).unwrap();
        inter += f.mean_abs_diff(&p).unwrap();
        for img in [&f, &p] {
            let a = augment(img, &aug, id as u64 * 2).unwrap();
            let b = augment(img, &aug, id as u64 * 2 + 1).unwrap();
            intra += a.mean_abs_diff(&b).unwrap() / 2.0;
        }
    }
    assert!(inter > intra, "inter-view {} vs augmentation {}", inter / 20.0, intra / 20.0);
}

fn gradient_image(n: usize) -> RgbImage {
    let mut img = RgbImage::filled(n, n, [0; 3]);
    for y in 0..n {
        for x in 0..n {
            img.put(x, y, [(x * 255 / (n - 1)) as u8, (y * 255 / (n - 1)) as u8, 128]);
        }
    }
    img
}

#[test]
fn resize_examples() {
    let img = gradient_image(20);
    assert_eq!(resize(&img, 20).unwrap(), img);
    let checker = RgbImage::new(2, 2, vec![0, 0, 0, 255, 255, 255, 255, 255, 255, 0, 0, 0]).unwrap();
    assert_eq!(resize(&checker, 1).unwrap().pixel(0, 0), [128; 3]);
    assert!(resize(&img, 0).is_err());
    let up = gradient_image(64);
    let round = resize(&resize(&up, 32).unwrap(), 64).unwrap();
    let interior: Vec<i32> = (2..62)
        .flat_map(|y| (2..62).map(move |x| (x, y)))
        .flat_map(|(x, y)| (0..3).map(move |c| (x, y, c)))
        .map(|(x, y, c)| up.pixel(x, y)[c] as i32 - round.pixel(x, y)[c] as i32)
        .collect();
    assert!(interior.iter().all(|d| d.abs() <= 1));
    assert!(up.mean_abs_diff(&round).unwrap() < 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn resize_keeps_constant_images(w in 1usize..30, h in 1usize..30, out in 1usize..40, c in any::<[u8; 3]>()) {
        let r = resize(&RgbImage::filled(w, h, c), out).unwrap();
        prop_assert_eq!(r, RgbImage::filled(out, out, c));
    }

    #[test]
    fn ppm_round_trip(w in 1usize..20, h in 1usize..20, s in any::<u64>()) {
        use rand::Rng;
        let mut rng = mvreid::seed::rng(s, &[]);
        let data: Vec<u8> = (0..w * h * 3).map(|_| rng.gen()).collect();
        let img = RgbImage::new(w, h, data).unwrap();
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        prop_assert_eq!(RgbImage::read_ppm(&buf[..]).unwrap(), img);
    }
}

#[test]
fn ppm_format() {
    let img = gradient_image(3);
    let mut buf = Vec::new();
    img.write_ppm(&mut buf).unwrap();
    assert!(buf.starts_with(b"P6\n3 3\n255\n"));
    assert_eq!(buf.len(), 11 + 27);
    assert!(matches!(RgbImage::read_ppm(&buf[..buf.len() - 1]), Err(mvreid::Error::Format(_))));
    let mut p3 = buf.clone();
    p3[1] = b'3';
    assert!(matches!(RgbImage::read_ppm(&p3[..]), Err(mvreid::Error::Format(_))));
    assert!(RgbImage::read_ppm(&b"P6\n3 3\n65535\n"[..]).is_err());
    assert!(RgbImage::read_ppm(&b"P6\n3"[..]).is_err());
    assert!(RgbImage::read_ppm(&b"P6\nx 3\n255\n"[..]).is_err());
    let mut commented = b"P6\n# made by hand\n3 3\n255\n".to_vec();
    commented.extend_from_slice(img.data());
    assert_eq!(RgbImage::read_ppm(&commented[..]).unwrap(), img);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ppm");
    img.save(&path).unwrap();
    assert_eq!(RgbImage::load(&path).unwrap(), img);
}

#[test]
fn identity_augmentation_is_plain_resize() {
    let img = render_view(&generate_identity(1, 1), View::Frontal, &RenderConfig::new(40), 3).unwrap();
    for out in [40, 32, 17] {
        assert_eq!(augment(&img, &AugmentConfig::identity(out), 5).unwrap(), resize(&img, out).unwrap());
    }
}

#[test]
fn augmentation_is_seeded() {
    let img = gradient_image(40);
    let cfg = AugmentConfig::training(32);
    let a = augment(&img, &cfg, 11).unwrap();
    assert_eq!(a.width(), 32);
    assert_eq!(a, augment(&img, &cfg, 11).unwrap());
    assert_ne!(a, augment(&img, &cfg, 12).unwrap());
}

#[test]
fn augmentation_never_mirrors() {
    let n = 48;
    let mut img = RgbImage::filled(n, n, [90, 90, 90]);
    for y in 20..28 {
        for x in 9..15 {
            img.put(x, y, [255, 0, 0]);
        }
    }
    let cfg = AugmentConfig::training(32);
    for s in 0..1000 {
        let out = augment(&img, &cfg, s).unwrap();
        let (mut sx, mut count) = (0.0, 0.0);
        for y in 0..32 {
            for x in 0..32 {
                let [r, g, _] = out.pixel(x, y);
                if r as i32 - g as i32 > 80 {
                    sx += x as f64;
                    count += 1.0;
                }
            }
        }
        assert!(count > 0.0, "seed {s}: marker lost");
        assert!(sx / count < 16.0, "seed {s}: marker centroid at x={}", sx / count);
    }
}

#[test]
fn degenerate_crops_are_rejected() {
    let img = gradient_image(16);
    let mut cfg = AugmentConfig::training(8);
    cfg.crop_scale = (0.0, 0.5);
    assert!(matches!(augment(&img, &cfg, 0), Err(mvreid::Error::Contract(_))));
    cfg.crop_scale = (0.9, 0.5);
    assert!(augment(&img, &cfg, 0).is_err());
    cfg.crop_scale = (0.04, 0.05);
    assert!(matches!(augment(&img, &cfg, 0), Err(mvreid::Error::Contract(_))));
}

#[test]
fn desk_dataset_layout() {
    let cfg = DatasetConfig::desk(3);
    assert_eq!(cfg.image_count(), 40 * 8 * 2 + 10 * 8 * 2 + 10 * 2 * 2);
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&cfg, dir.path()).unwrap();
    assert_eq!(m.rows.len(), cfg.image_count());
    assert_eq!(files(&dir.path().join("images")).len(), cfg.image_count());
    assert_eq!(m.identities(Split::Test), m.identities(Split::Database));
    assert!(m.identities(Split::Train).is_disjoint(&m.identities(Split::Database)));
    assert_eq!(m.identities(Split::Train).len(), 40);
    m.check_layout().unwrap();
    m.check_files(dir.path()).unwrap();
    assert_eq!(Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap(), m);
    let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    assert!(text.starts_with("path,identity,view,split,capture_group\n"));
    assert!(!text.contains('\r'));

    let ds = Dataset::load(dir.path()).unwrap();
    assert_eq!(ds.pairs.len(), cfg.image_count() / 2);
    assert_eq!(ds.pairs_in(&[Split::Test]).len(), 20);
    assert!(ds.pairs.iter().all(|p| p.is_complete()));
    assert!(ds.pairs.iter().all(|p| p.view(View::Frontal).unwrap().width() == 32));
}

#[test]
fn regeneration_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    build_dataset(&small_config(4), a.path()).unwrap();
    build_dataset(&small_config(4), b.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
    let c = tempfile::tempdir().unwrap();
    build_dataset(&small_config(5), c.path()).unwrap();
    assert_ne!(files(a.path()), files(c.path()));
    assert!(build_dataset(&small_config(4), a.path()).is_err());
}

#[test]
fn manifest_integrity_checks() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = build_dataset(&small_config(6), dir.path()).unwrap();
    std::fs::write(dir.path().join("images/train/stray.ppm"), b"x").unwrap();
    assert!(m.check_files(dir.path()).is_err());
    std::fs::remove_file(dir.path().join("images/train/stray.ppm")).unwrap();
    m.check_files(dir.path()).unwrap();
    let removed = m.rows.pop().unwrap();
    assert!(m.check_files(dir.path()).is_err());
    m.rows.push(removed.clone());
    m.rows.push(removed);
    assert!(m.check_files(dir.path()).is_err());

    let mut leak = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    leak.rows[0].split = Split::Database;
    assert!(leak.check_layout().is_err());
    let mut orphan = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    orphan.rows.last_mut().unwrap().identity = 999;
    assert!(orphan.check_layout().is_err());

    let mut partial = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    let dropped = partial.rows.pop().unwrap();
    partial.save(&dir.path().join(MANIFEST_FILE)).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    let incomplete: Vec<_> = ds.pairs.iter().filter(|p| !p.is_complete()).collect();
    assert_eq!(incomplete.len(), 1);
    assert_eq!((incomplete[0].identity, incomplete[0].capture_group), (dropped.identity, dropped.capture_group));
    assert!(incomplete[0].view(dropped.view).is_none());

    assert!(Manifest::read_csv(&b"path,id\n"[..]).is_err());
    assert!(Manifest::read_csv(&b"path,identity,view,split,capture_group\na,1,side,train,0\n"[..]).is_err());
    assert!(Manifest::read_csv(&b"path,identity,view,split,capture_group\na,1,frontal,train\n"[..]).is_err());
}

#[test]
fn config_contracts() {
    let mut c = small_config(1);
    c.test_ids = 3;
    assert!(c.validate().is_err());
    let mut c = small_config(1);
    c.train_groups = 0;
    assert!(c.validate().is_err());
    assert!(DatasetConfig::preset("paper", 1).unwrap().train_ids == 387);
    assert!(DatasetConfig::preset("huge", 1).is_err());
    let ro = tempfile::tempdir().unwrap();
    let file = ro.path().join("f");
    std::fs::write(&file, b"").unwrap();
    assert!(matches!(build_dataset(&small_config(1), &file.join("sub")), Err(mvreid::Error::Io(_))));
}

#[test]
fn tensor_conversion() {
    let a = RgbImage::filled(3, 2, [255, 0, 51]);
    let b = gradient_image(3);
    assert!(images_to_tensor(&[&a, &b]).is_err());
    let t = images_to_tensor(&[&a, &a]).unwrap();
    assert_eq!(t.shape(), &[2, 3, 2, 3]);
    assert_eq!(&t.data()[..6], &[1.0; 6]);
    assert_eq!(t.data()[6], 0.0);
    assert!((t.data()[12] - 0.2).abs() < 1e-6);
}
