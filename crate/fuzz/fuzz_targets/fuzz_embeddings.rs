//! Class-embedding table parser.

#![no_main]
use libfuzzer_sys::fuzz_target;

const MAX_INPUT: usize = 1 << 16;

fuzz_target!(|data: &[u8]| {
    if data.len() > MAX_INPUT {
        return;
    }
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(table) = bgr_core::io::EmbeddingFile::parse(text) {
            for (name, vec) in &table.embeddings {
                assert_eq!(vec.len(), table.dim);
                assert!(vec.iter().all(|v| v.is_finite()));
                assert_eq!(table.get(name).unwrap(), vec.as_slice());
            }
            let names: Vec<String> = table.embeddings.keys().cloned().collect();
            if !names.is_empty() {
                let stacked = table.stack(&names).expect("all names present");
                assert_eq!(stacked.rows(), names.len());
            }
        }
    }
});
