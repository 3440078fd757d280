#![no_main]

use covtool_core::grid::GridRegion;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(region) = GridRegion::from_text(text) {
        let again = GridRegion::from_text(&region.to_text()).expect("printed regions parse");
        assert_eq!(again, region);
    }
});
