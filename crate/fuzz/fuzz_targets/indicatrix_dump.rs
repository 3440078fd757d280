#![no_main]

use covtool_core::indicatrix::IndicatrixGrid;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(grid) = IndicatrixGrid::from_text(text) {
        let again = IndicatrixGrid::from_text(&grid.to_text()).expect("printed dumps parse");
        assert_eq!(again, grid);
        assert!(grid.integral().is_finite());
    }
});
