//! Parse progress markers out of a token stream that arrives in awkward
//! chunks, as it would from a model server.

use cot_progress::stream::{StreamEvent, StreamParser};

fn main() -> cot_progress::Result<()> {
    let chunks = [
        "First, factor the quadratic. <progr",
        "essbar>25</progressbar> The roots are 2 and 3. <progressbar> 6",
        "0 </progressbar> Wait, recheck the sign. <progressbar>250</progressbar>",
        " Done. <progressbar>100</progre",
        "ssbar>",
    ];
    let mut parser = StreamParser::new();
    for chunk in chunks {
        for event in parser.feed(chunk.as_bytes())? {
            show(&event);
        }
    }
    for event in parser.finish() {
        show(&event);
    }
    Ok(())
}

fn show(event: &StreamEvent) {
    match event {
        StreamEvent::Text(t) => println!("text     {:?}", String::from_utf8_lossy(t)),
        StreamEvent::Progress { value, offset, .. } => println!("progress {value:>3}% at byte {offset}"),
        StreamEvent::Warning { message, offset } => println!("warning  {message} at byte {offset}"),
        StreamEvent::End => println!("end"),
    }
}
