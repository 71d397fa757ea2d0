#![no_main]

use libfuzzer_sys::fuzz_target;
use melstyle::pipeline::corpus::{manifest_line, parse_manifest};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_manifest(text) {
        let written: String = records.iter().map(|r| manifest_line(r) + "\n").collect();
        assert_eq!(parse_manifest(&written).expect("written manifest parses"), records);
    }
});
