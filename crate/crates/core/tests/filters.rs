use hyperdet::filterbank::{load_kernels, make_views, FilterBank, FilterGroup, NUM_KERNELS};
use hyperdet::imaging::Image;
use hyperdet::{Error, ViewSource};

#[test]
fn literal_kernels() {
    let bank = FilterBank::builtin();
    let k1 = bank.kernel(1).unwrap();
    let mut want = [[0.0; 5]; 5];
    want[2][2] = -1.0;
    want[2][3] = 1.0;
    assert_eq!(k1.weights(), &want);
    assert_eq!(k1.normalizer(), 1.0);

    let k21 = bank.kernel(21).unwrap();
    let square3 = [[-1.0, 2.0, -1.0], [2.0, -4.0, 2.0], [-1.0, 2.0, -1.0]];
    for (u, row) in square3.iter().enumerate() {
        assert_eq!(&k21.weights()[u + 1][1..4], row);
    }
    assert_eq!(k21.normalizer(), 4.0);

    let k26 = bank.kernel(26).unwrap();
    let square5 = [
        [-1.0, 2.0, -2.0, 2.0, -1.0],
        [2.0, -6.0, 8.0, -6.0, 2.0],
        [-2.0, 8.0, -12.0, 8.0, -2.0],
        [2.0, -6.0, 8.0, -6.0, 2.0],
        [-1.0, 2.0, -2.0, 2.0, -1.0],
    ];
    assert_eq!(k26.weights(), &square5);
    assert_eq!(k26.normalizer(), 12.0);
}

#[test]
fn every_kernel_is_zero_sum_with_centre_minus_q() {
    let bank = FilterBank::builtin();
    assert_eq!(bank.kernels().len(), NUM_KERNELS);
    for k in bank.kernels() {
        let sum: f64 = k.weights().iter().flatten().sum();
        assert_eq!(sum, 0.0, "kernel {}", k.id());
        assert_eq!(k.weights()[2][2], -k.normalizer(), "kernel {}", k.id());
    }
}

#[test]
fn groups_partition_the_bank() {
    let groups = FilterGroup::all();
    let sizes: Vec<usize> = groups.iter().map(|g| g.kernel_ids.len()).collect();
    assert_eq!(sizes, vec![8, 4, 8, 5, 5]);
    let mut ids: Vec<u8> = groups.iter().flat_map(|g| g.kernel_ids.clone()).collect();
    ids.sort_unstable();
    assert_eq!(ids, (1..=30).collect::<Vec<u8>>());
    assert_eq!(FilterGroup::containing(13).unwrap().group_id, 3);
}

#[test]
fn text_format_round_trips_and_loads_from_disk() {
    let bank = FilterBank::builtin();
    let again = FilterBank::parse(&bank.to_text()).unwrap();
    assert_eq!(again, bank);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.txt");
    std::fs::write(&path, FilterBank::builtin_text()).unwrap();
    assert_eq!(load_kernels(&path).unwrap(), bank);
}

#[test]
fn malformed_kernel_files_are_rejected() {
    let text = FilterBank::builtin_text();
    let without_last: String = text
        .lines()
        .filter(|l| !l.starts_with("30 "))
        .map(|l| format!("{l}\n"))
        .collect();
    let err = FilterBank::parse(&without_last).unwrap_err();
    assert!(matches!(err, Error::KernelManifest(ref m) if m.contains("30")), "{err}");

    let not_zero_sum = text.replacen("\n1 0 0 0 0 0 0 0 0 0 0 0 0 -1 1", "\n1 0 0 0 0 0 0 0 0 0 0 0 0 -1 2", 1);
    assert!(matches!(FilterBank::parse(&not_zero_sum), Err(Error::KernelInvariant { id: 1, .. })));

    let duplicated = format!("{text}\n1 0 0 0 0 0 0 0 0 0 0 0 0 -1 1 0 0 0 0 0 0 0 0 0 0 0 1\n");
    assert!(matches!(FilterBank::parse(&duplicated), Err(Error::KernelManifest(_))));
}

#[test]
fn views_come_in_expert_order_with_the_original_last() {
    let img = Image::from_fn(9, 7, 3, |(y, x, c)| ((y * 7 + x * 3 + c) % 5) as f64 / 5.0);
    let views = make_views(&img, &FilterBank::builtin()).unwrap();
    assert_eq!(views.len(), 6);
    for (i, v) in views.iter().enumerate() {
        assert_eq!(v.source.expert(), i + 1);
        assert_eq!(v.pixels.dim(), img.dim());
    }
    assert_eq!(views[5].source, ViewSource::Original);
    assert_eq!(views[5].pixels, img);
}

#[test]
fn single_pixel_and_non_finite_inputs() {
    let bank = FilterBank::builtin();
    let one = Image::filled(1, 1, 3, 0.5);
    let views = make_views(&one, &bank).unwrap();
    assert!(views[..5].iter().all(|v| v.pixels.data().iter().all(|&p| p == 0.0)));
    let mut bad = Image::filled(4, 4, 1, 0.5);
    bad.data_mut()[[1, 1, 0]] = f64::NAN;
    assert!(make_views(&bad, &bank).is_err());
}
