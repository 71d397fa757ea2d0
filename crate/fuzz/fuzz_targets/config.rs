#![no_main]

use libfuzzer_sys::fuzz_target;
use melstyle::config::Config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = Config::parse(text) {
        assert_eq!(Config::parse(&cfg.to_text()).expect("written config parses"), cfg);
    }
});
