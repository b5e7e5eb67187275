fn main() {
    // Command surface lands with the codec pipeline.
    println!("wavecc");
}
