#![no_main]

use corrmeta::dataset::FactorMapping;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(mapping) = FactorMapping::parse_str(text) {
        let again = FactorMapping::parse_str(&mapping.to_csv()).expect("serialized mapping reparses");
        assert_eq!(again.len(), mapping.len());
    }
});
