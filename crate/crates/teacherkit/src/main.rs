fn main() { std::process::exit(teacherkit::cli::run()); }
