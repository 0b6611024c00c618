#![no_main]

use hsdm::data::{read_csv, CsvSchema};
use hsdm::Session;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ingested) = read_csv(data, &CsvSchema::default(), Session::default(), "fuzz") {
        for day in &ingested.days {
            let mut prev = day.anchor_time_ms;
            for r in &day.records {
                assert!(r.duration_ms > 0 && r.clock_time_ms > prev);
                prev = r.clock_time_ms;
            }
        }
    }
});
