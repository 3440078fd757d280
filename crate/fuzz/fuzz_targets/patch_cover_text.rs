#![no_main]

use covtool_core::patches::PatchCover;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cover) = PatchCover::from_text(text) {
        let again = PatchCover::from_text(&cover.to_text()).expect("printed covers parse");
        assert_eq!(again, cover);
    }
});
