//! End-to-end mock-mode generation: hermetic, deterministic, resumable.

use std::fs;
use std::path::Path;

use maemi_datagen::client::{mock_key, TeacherClient};
use maemi_datagen::dataset::{generate_dataset, load_dataset, Split, SplitFractions};
use maemi_datagen::error::Error;
use maemi_datagen::templates::render_templates;

/// Minimal binary PPM so the images are real decodable files.
fn ppm_bytes(tint: u8) -> Vec<u8> {
    let mut bytes = b"P6\n2 2\n255\n".to_vec();
    bytes.extend(std::iter::repeat(tint).take(12));
    bytes
}

/// Seed the mock directory with an answer for every (image, question) pair
/// generation will ask about.
fn seed_mock_answers(mock_dir: &Path, images: &[(&str, Vec<u8>, &str)], both_styles: bool) {
    for (name, bytes, hint) in images {
        for prompt in render_templates(hint) {
            let mut questions = vec![prompt.question.clone()];
            if both_styles {
                questions.push(format!("{} Answer in one concise sentence.", prompt.question));
            }
            for q in questions {
                let answer = format!("answer about {name} for {}", prompt.category.tag());
                fs::write(mock_dir.join(mock_key(bytes, &q)), answer).unwrap();
            }
        }
    }
}

#[test]
fn three_images_make_thirty_records() {
    let tmp = tempfile::tempdir().unwrap();
    let img_dir = tmp.path().join("images");
    fs::create_dir(&img_dir).unwrap();
    let images = [
        ("a.ppm", ppm_bytes(10), "nanomaterial"),
        ("b.ppm", ppm_bytes(20), "nanomaterial"),
        ("c.ppm", ppm_bytes(30), "nanomaterial"),
    ];
    for (name, bytes, _) in &images {
        fs::write(img_dir.join(name), bytes).unwrap();
    }
    let mock_dir = tmp.path().join("mock");
    fs::create_dir(&mock_dir).unwrap();
    seed_mock_answers(&mock_dir, &images, false);

    let client = TeacherClient::mock(&mock_dir);
    let out = tmp.path().join("data.jsonl");
    let report =
        generate_dataset(&img_dir, &client, &out, SplitFractions::default(), 0, false).unwrap();
    assert_eq!(report.images, 3);
    assert_eq!(report.written, 30);
    assert_eq!(report.skipped, 0);

    let records = load_dataset(&out).unwrap();
    assert_eq!(records.len(), 30);
    for rec in &records {
        assert!(!rec.answer.is_empty());
        assert_eq!(rec.answer_style, "long");
    }
    // sorted by (image, template, style)
    let keys: Vec<_> = records
        .iter()
        .map(|r| (r.image.clone(), r.template.clone(), r.answer_style.clone()))
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn rerun_is_byte_identical_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let img_dir = tmp.path().join("images");
    fs::create_dir(&img_dir).unwrap();
    let images = [
        ("x.ppm", ppm_bytes(1), "nanomaterial"),
        ("y.ppm", ppm_bytes(2), "nanomaterial"),
    ];
    for (name, bytes, _) in &images {
        fs::write(img_dir.join(name), bytes).unwrap();
    }
    let mock_dir = tmp.path().join("mock");
    fs::create_dir(&mock_dir).unwrap();
    seed_mock_answers(&mock_dir, &images, true);

    let client = TeacherClient::mock(&mock_dir);
    let out = tmp.path().join("data.jsonl");
    let first =
        generate_dataset(&img_dir, &client, &out, SplitFractions::default(), 3, true).unwrap();
    assert_eq!(first.written, 40); // 2 images x 10 templates x 2 styles
    let bytes_first = fs::read(&out).unwrap();

    let second =
        generate_dataset(&img_dir, &client, &out, SplitFractions::default(), 3, true).unwrap();
    assert_eq!(second.written, 0);
    assert_eq!(second.skipped, 40);
    assert_eq!(fs::read(&out).unwrap(), bytes_first);
}

#[test]
fn categories_come_from_subdirectories() {
    let tmp = tempfile::tempdir().unwrap();
    let img_dir = tmp.path().join("images");
    fs::create_dir_all(img_dir.join("nanowires")).unwrap();
    let bytes = ppm_bytes(42);
    fs::write(img_dir.join("nanowires/w.ppm"), &bytes).unwrap();
    let mock_dir = tmp.path().join("mock");
    fs::create_dir(&mock_dir).unwrap();
    seed_mock_answers(&mock_dir, &[("w.ppm", bytes, "nanowires")], false);

    let client = TeacherClient::mock(&mock_dir);
    let out = tmp.path().join("data.jsonl");
    generate_dataset(&img_dir, &client, &out, SplitFractions::default(), 0, false).unwrap();
    let records = load_dataset(&out).unwrap();
    assert_eq!(records.len(), 10);
    for rec in &records {
        assert_eq!(rec.category.as_deref(), Some("nanowires"));
        assert_eq!(rec.image, "nanowires/w.ppm");
        assert!(rec.question.contains("nanowires"));
        assert_eq!(rec.split, records[0].split); // split is per image
    }
}

#[test]
fn empty_image_dir_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let client = TeacherClient::mock(tmp.path());
    let out = tmp.path().join("data.jsonl");
    match generate_dataset(
        tmp.path(),
        &client,
        &out,
        SplitFractions::default(),
        0,
        false,
    ) {
        Err(Error::EmptyImageDir(_)) => {}
        other => panic!("unexpected: {other:?}"),
    }
}

#[test]
fn mock_miss_names_the_expected_key() {
    let tmp = tempfile::tempdir().unwrap();
    let client = TeacherClient::mock(tmp.path());
    let expected = mock_key(b"img", "what is this?");
    match client.request_qa(b"img", "what is this?") {
        Err(Error::MockMiss { key }) => assert_eq!(key, expected),
        other => panic!("unexpected: {other:?}"),
    }
}

#[test]
fn mock_hit_returns_contents_verbatim() {
    let tmp = tempfile::tempdir().unwrap();
    let key = mock_key(b"img", "q?");
    fs::write(tmp.path().join(&key), "the answer\nwith two lines").unwrap();
    let client = TeacherClient::mock(tmp.path());
    assert_eq!(
        client.request_qa(b"img", "q?").unwrap(),
        "the answer\nwith two lines"
    );
}

#[test]
fn malformed_jsonl_line_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.jsonl");
    fs::write(&path, "{\"id\": 3}\n").unwrap();
    match load_dataset(&path) {
        Err(Error::MalformedRecord { line: 1, .. }) => {}
        other => panic!("unexpected: {other:?}"),
    }
}

#[test]
fn splits_cover_all_three_on_a_ten_image_corpus() {
    let ids: Vec<String> = (0..10).map(|i| format!("{i}.ppm")).collect();
    let splits =
        maemi_datagen::dataset::assign_splits(&ids, SplitFractions::default(), 5).unwrap();
    let count = |s: Split| splits.iter().filter(|&&x| x == s).count();
    assert_eq!(count(Split::Train), 8);
    assert_eq!(count(Split::Val), 1);
    assert_eq!(count(Split::Test), 1);
}
