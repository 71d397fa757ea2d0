#![no_main]

use libfuzzer_sys::fuzz_target;
use melstyle::autograd::Tensor;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = Tensor::from_gstn(data) {
        // Whatever decodes must re-encode to a file that decodes the same.
        let again = Tensor::from_gstn(&t.to_gstn()).expect("re-encoded tensor decodes");
        assert_eq!(again.dims(), t.dims());
    }
    if let Ok((_, used)) = Tensor::read_gstn_prefix(data) {
        assert!(used <= data.len());
    }
});
