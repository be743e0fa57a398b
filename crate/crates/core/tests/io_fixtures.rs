use std::path::PathBuf;

use imfnet_core::data::{
    parse_ply, parse_ppm, ply_string, ppm_bytes, read_ply, read_ppm, write_ply, write_ppm,
};
use imfnet_core::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn parse_error(result: Result<impl std::fmt::Debug, Error>) -> (usize, String) {
    match result {
        Err(Error::Parse { offset, message }) => (offset, message),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn golden_ply_parses_to_known_values() {
    let cloud = read_ply(&fixture("triangle.ply")).unwrap();
    assert_eq!(
        cloud.points,
        vec![[0.0, 0.0, 0.0], [1.5, -2.25, 0.125], [0.333333333, 1e12, -7.0]]
    );
    assert_eq!(cloud.colors, vec![[255, 0, 0], [0, 255, 0], [0, 0, 255]]);
}

#[test]
fn golden_ply_round_trips_byte_for_byte() {
    let bytes = std::fs::read(fixture("triangle.ply")).unwrap();
    let cloud = parse_ply(std::str::from_utf8(&bytes).unwrap()).unwrap();
    assert_eq!(ply_string(&cloud).as_bytes(), bytes.as_slice());

    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("copy.ply");
    write_ply(&out, &cloud).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), bytes);
    assert_eq!(read_ply(&out).unwrap(), cloud);
}

#[test]
fn golden_ppm_round_trips_byte_for_byte() {
    let bytes = std::fs::read(fixture("triangle.ppm")).unwrap();
    let img = parse_ppm(&bytes).unwrap();
    assert_eq!((img.width(), img.height()), (2, 2));
    assert_eq!(img.to_rgb8(), vec![255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30]);
    assert_eq!(ppm_bytes(&img), bytes);

    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("copy.ppm");
    write_ppm(&out, &img).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), bytes);
    assert_eq!(read_ppm(&out).unwrap(), img);
}

#[test]
fn malformed_ply_fixtures_report_offset_and_reason() {
    let text = std::fs::read_to_string(fixture("truncated.ply")).unwrap();
    let (off, msg) = parse_error(parse_ply(&text));
    assert_eq!(off, text.len());
    assert!(msg.contains("truncated body: 2 of 3 vertices"), "{msg}");

    let text = std::fs::read_to_string(fixture("bad_value.ply")).unwrap();
    let (off, msg) = parse_error(parse_ply(&text));
    assert_eq!(off, text.find("1 abc").unwrap());
    assert!(msg.contains("vertex 1: cannot parse 'abc'"), "{msg}");

    let text = std::fs::read_to_string(fixture("no_magic.ply")).unwrap();
    let (off, msg) = parse_error(parse_ply(&text));
    assert_eq!(off, 0);
    assert!(msg.contains("magic"), "{msg}");

    let text = std::fs::read_to_string(fixture("binary.ply")).unwrap();
    let (off, msg) = parse_error(parse_ply(&text));
    assert_eq!(off, text.find("format").unwrap());
    assert!(msg.contains("ascii"), "{msg}");
}

#[test]
fn malformed_ppm_fixtures_report_offset_and_reason() {
    let bytes = std::fs::read(fixture("truncated.ppm")).unwrap();
    let (off, msg) = parse_error(parse_ppm(&bytes));
    assert_eq!(off, bytes.len());
    assert!(msg.contains("truncated raster: 5 of 12 bytes"), "{msg}");

    let (off, msg) = parse_error(parse_ppm(&std::fs::read(fixture("ascii.ppm")).unwrap()));
    assert_eq!(off, 0);
    assert!(msg.contains("P6"), "{msg}");

    let (_, msg) = parse_error(parse_ppm(&std::fs::read(fixture("maxval16.ppm")).unwrap()));
    assert!(msg.contains("maxval 65535"), "{msg}");
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(matches!(read_ply(&fixture("absent.ply")), Err(Error::Io(_))));
}
