#![no_main]

use corrmeta::dataset::{CodedDataset, FactorMapping};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(ds) = CodedDataset::parse_str(text, FactorMapping::standard()) {
        let ds = ds.apply_mapping();
        let _ = ds.group_by_factor();
        let again = CodedDataset::parse_str(&ds.to_csv(), FactorMapping::standard())
            .expect("serialized dataset reparses")
            .apply_mapping();
        assert_eq!(again.effects.len(), ds.effects.len());
    }
});
