#![no_main]

use hsdm::prediction::{read_runs, write_runs};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(runs) = read_runs(data) {
        let mut first = Vec::new();
        write_runs(&runs, &mut first).unwrap();
        let again = read_runs(&first[..]).expect("written predictions parse");
        let mut second = Vec::new();
        write_runs(&again, &mut second).unwrap();
        assert_eq!(first, second);
    }
});
