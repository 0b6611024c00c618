#![no_main]

use hsdm::bundle::{BundleManifest, MANIFEST_FILE};
use hsdm::FittedModel;
use libfuzzer_sys::fuzz_target;
use std::collections::BTreeMap;

// Input is either a bare manifest or an object mapping bundle file names to
// their JSON contents.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = BundleManifest::from_json(text);
    let Ok(files) = serde_json::from_str::<BTreeMap<String, serde_json::Value>>(text) else { return };
    let parts: BTreeMap<String, String> = files.iter().map(|(k, v)| (k.clone(), v.to_string())).collect();
    let Some(manifest) = parts.get(MANIFEST_FILE) else { return };
    let Ok(manifest) = BundleManifest::from_json(manifest) else { return };
    let _ = FittedModel::from_parts(&manifest, &parts);
});
