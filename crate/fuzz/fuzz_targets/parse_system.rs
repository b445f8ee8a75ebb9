#![no_main]

use libfuzzer_sys::fuzz_target;

// Parsing never panics; accepted input survives a text round trip.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = avcat::expr::parse_system(text) {
        let again = avcat::expr::parse_system(&spec.to_text()).expect("printed system reparses");
        assert_eq!(spec.to_text(), again.to_text());
    }
});
