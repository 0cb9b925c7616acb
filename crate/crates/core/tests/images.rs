use lrgan_core::eval::{
    load_image_folder, make_synthetic_dataset, read_image, write_image, DatasetKind,
    SyntheticDatasetSpec,
};
use lrgan_core::Error;

#[test]
fn folder_of_three_ppms_loads_in_name_order() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = make_synthetic_dataset::<f64>(&SyntheticDatasetSpec::new(
        DatasetKind::GradientBlobs,
        3,
        12,
        5,
    ))
    .unwrap();
    for (i, img) in imgs.iter().enumerate() {
        write_image(img, &dir.path().join(format!("{i}.ppm"))).unwrap();
    }
    let loaded = load_image_folder(dir.path(), 12).unwrap();
    assert_eq!(loaded.len(), 3);
    for (a, b) in loaded.iter().zip(&imgs) {
        assert_eq!(a.shape(), [3, 12, 12]);
        let err = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1.0 / 255.0, "{err}");
    }
}

#[test]
fn a_non_image_file_is_an_error_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let img =
        make_synthetic_dataset::<f64>(&SyntheticDatasetSpec::new(DatasetKind::Mirror, 1, 8, 0))
            .unwrap();
    write_image(&img[0], &dir.path().join("a.ppm")).unwrap();
    std::fs::write(dir.path().join("notes.txt"), "hello").unwrap();
    match load_image_folder(dir.path(), 8) {
        Err(Error::Data { path, .. }) => assert!(path.ends_with("notes.txt")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn write_then_read_is_within_one_level() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ppm");
    for (k, img) in make_synthetic_dataset::<f32>(&SyntheticDatasetSpec::new(
        DatasetKind::PairedDots,
        4,
        16,
        2,
    ))
    .unwrap()
    .iter()
    .enumerate()
    {
        write_image(img, &path).unwrap();
        let back = read_image(&path).unwrap();
        let err = back
            .data()
            .iter()
            .zip(img.data())
            .map(|(x, y)| (x - f64::from(*y)).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1.0 / 255.0, "image {k}: {err}");
    }
}
