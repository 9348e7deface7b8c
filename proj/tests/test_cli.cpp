#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

const std::string kCli = PBKD_CLI_PATH;
const std::string kData = PBKD_DATA_DIR;

struct CliResult {
    int exit_code = -1;
    std::string output;  // stdout and stderr combined
};

CliResult run_cli(const std::string& args, const fs::path& dir) {
    const fs::path log = dir / "out.txt";
    const std::string cmd = kCli + " " + args + " > " + log.string() + " 2>&1";
    const int rc = std::system(cmd.c_str());
    CliResult r;
    r.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    r.output = ss.str();
    return r;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "pbkd_cli_test" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

const std::string kToyModel = kData + "/models/toy_teacher.json";
const std::string kFiveProfile = kData + "/profiles/five_tasks.csv";
const std::string kTrace = kData + "/traces/wfd_two_workers.csv";
const std::string kCounters = kData + "/counters/distill_energy.csv";

}  // namespace

TEST_CASE("cli: help exits zero, usage errors exit two") {
    const fs::path dir = fresh_dir("basic");
    CHECK(run_cli("--help", dir).exit_code == 0);
    CHECK(run_cli("", dir).exit_code == 2);                    // subcommand required
    CHECK(run_cli("--no-such-flag flops", dir).exit_code == 2);
    CHECK(run_cli("frobnicate", dir).exit_code == 2);          // unknown subcommand
    CHECK(run_cli("flops", dir).exit_code == 2);               // flops needs --model
    CHECK(run_cli("flops --model /nonexistent.json", dir).exit_code == 2);
    CHECK(run_cli("plan --workers 2", dir).exit_code == 2);    // plan needs --profile
    CHECK(run_cli("report --out " + (dir / "r").string(), dir).exit_code == 2);
    CHECK(run_cli("eval --model " + kToyModel, dir).exit_code == 2);
    CHECK(run_cli("distill --model " + kToyModel, dir).exit_code == 2);  // no weights
    CHECK(run_cli("plan --profile " + kFiveProfile + " --policy fastest", dir).exit_code == 2);
    CHECK(run_cli("plan --profile " + kFiveProfile + " --workers 0", dir).exit_code == 2);
    CHECK(run_cli("distill --threshold 1.5 --model " + kToyModel, dir).exit_code == 2);
}

TEST_CASE("cli: malformed input files exit two") {
    const fs::path dir = fresh_dir("badfiles");
    const fs::path badjson = dir / "bad.json";
    std::ofstream(badjson) << "{ not json";
    CHECK(run_cli("flops --model " + badjson.string(), dir).exit_code == 2);

    const fs::path badcsv = dir / "bad.csv";
    std::ofstream(badcsv) << "task_id,weight_seconds\n1,-4\n";
    CHECK(run_cli("plan --profile " + badcsv.string(), dir).exit_code == 2);

    const fs::path badtrace = dir / "trace.csv";
    std::ofstream(badtrace) << "timestamp_s,worker_id,task_id,kind\n0,0,1,warp\n";
    CHECK(run_cli("report --trace " + badtrace.string() + " --out " + (dir / "r").string(),
                  dir)
              .exit_code == 2);

    const fs::path badweights = dir / "weights.pbkd";
    std::ofstream(badweights) << "XXXX not a checkpoint";
    CHECK(run_cli("eval --model " + kToyModel + " --weights " + badweights.string(), dir)
              .exit_code == 2);
}

TEST_CASE("cli: an empty profile is nothing to do") {
    const fs::path dir = fresh_dir("nothing");
    const fs::path empty = dir / "empty.csv";
    std::ofstream(empty) << "task_id,weight_seconds\n";
    CliResult r = run_cli("plan --profile " + empty.string(), dir);
    CHECK(r.exit_code == 3);
    CHECK(r.output.find("nothing to do") != std::string::npos);
}

TEST_CASE("cli: flops prints the cost table and json") {
    const fs::path dir = fresh_dir("flops");
    CliResult r = run_cli("flops --model " + kToyModel, dir);
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("block1") != std::string::npos);
    CHECK(r.output.find("replaceable") != std::string::npos);
    CHECK(r.output.find("total macs 995648") != std::string::npos);
}

TEST_CASE("cli: plan reports the wfd assignment from the worked example") {
    const fs::path dir = fresh_dir("plan");
    CliResult r = run_cli("plan --profile " + kFiveProfile + " --workers 2 --policy wfd", dir);
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("makespan 17.00") != std::string::npos);

    CliResult rr =
        run_cli("plan --profile " + kFiveProfile + " --workers 2 --policy round_robin", dir);
    CHECK(rr.output.find("makespan 18.00") != std::string::npos);

    CliResult ws =
        run_cli("plan --profile " + kFiveProfile + " --workers 2 --policy work_stealing", dir);
    CHECK(ws.exit_code == 0);
    CHECK(ws.output.find("simulated wall") != std::string::npos);
}

TEST_CASE("cli: report computes the documented ratios from bundled files") {
    const fs::path dir = fresh_dir("report");
    const fs::path out = dir / "rep";
    CliResult r = run_cli("report --trace " + kTrace + " --counters " + kCounters + " --out " +
                              out.string(),
                          dir);
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("greenup 1.29") != std::string::npos);
    CHECK(r.output.find("derived") != std::string::npos);

    std::ifstream in(out / "report.json");
    REQUIRE(in.good());
    nlohmann::json doc = nlohmann::json::parse(in);
    CHECK(doc["speedup"].get<double>() == doctest::Approx(30.0 / 17.0));
    CHECK(doc["greenup"].get<double>() == doctest::Approx(1263430.0 / 977390.0));
    CHECK(doc["energy_source"] == "counters");
    CHECK(fs::exists(out / "timeline.csv"));
}

TEST_CASE("cli: config file supplies defaults, flags win") {
    const fs::path dir = fresh_dir("config");
    const fs::path cfg = dir / "run.cfg";
    std::ofstream(cfg) << "workers=3\npolicy=wfd\n";

    CliResult r = run_cli("--config " + cfg.string() + " plan --profile " + kFiveProfile, dir);
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("\"workers\":3") != std::string::npos);
    CHECK(r.output.find("\"policy\":\"wfd\"") != std::string::npos);

    CliResult over = run_cli("--config " + cfg.string() + " --workers 2 plan --profile " +
                                 kFiveProfile,
                             dir);
    CHECK(over.output.find("\"workers\":2") != std::string::npos);
}

TEST_CASE("cli: full pipeline on a tiny run, then eval the student") {
    const fs::path dir = fresh_dir("pipeline");
    const std::string common =
        " --model " + kToyModel + " --dataset-size 100 --eval-fraction 0.1 --seed 7";

    const fs::path tdir = dir / "teacher";
    CliResult teach =
        run_cli("train-teacher --teacher-epochs 2 --out " + tdir.string() + common, dir);
    CHECK(teach.exit_code == 0);
    REQUIRE(fs::exists(tdir / "teacher.pbkd"));

    const fs::path ddir = dir / "run";
    CliResult dist = run_cli("distill --teacher-weights " + (tdir / "teacher.pbkd").string() +
                                 " --epochs-per-block 1 --finetune-epochs 1 --threshold 0.0" +
                                 " --workers 2 --out " + ddir.string() + common,
                             dir);
    CHECK(dist.exit_code == 0);
    for (const char* artifact :
         {"student.pbkd", "report.json", "replacement_log.json", "trace.csv",
          "config-resolved.txt"})
        CHECK(fs::exists(ddir / artifact));

    std::ifstream in(ddir / "report.json");
    nlohmann::json doc = nlohmann::json::parse(in);
    CHECK(doc["accuracy"].contains("teacher"));
    CHECK(doc["accuracy"].contains("student"));
    CHECK(doc["cost"]["mac_ratio"].get<double>() <= 1.0);
    CHECK(doc["cost"]["teacher_macs"].get<long long>() == 995648);
    CHECK(doc["schedule"]["workers"].get<int>() == 2);

    CliResult ev = run_cli("eval --weights " + (ddir / "student.pbkd").string() + common, dir);
    CHECK(ev.exit_code == 0);
    CHECK(ev.output.find("accuracy") != std::string::npos);

    // The resolved config echoes every effective setting.
    std::ifstream cfg(ddir / "config-resolved.txt");
    std::stringstream ss;
    ss << cfg.rdbuf();
    CHECK(ss.str().find("workers=2") != std::string::npos);
    CHECK(ss.str().find("policy=round_robin") != std::string::npos);
}

TEST_CASE("cli: a threshold of 1.0 replaces nothing but still succeeds") {
    const fs::path dir = fresh_dir("noreplace");
    const std::string common = " --model " + kToyModel + " --dataset-size 100 --seed 7";
    const fs::path tdir = dir / "teacher";
    REQUIRE(run_cli("train-teacher --teacher-epochs 1 --out " + tdir.string() + common, dir)
                .exit_code == 0);

    const fs::path ddir = dir / "run";
    CliResult dist = run_cli("distill --teacher-weights " + (tdir / "teacher.pbkd").string() +
                                 " --epochs-per-block 1 --max-steps 1 --finetune-epochs 0" +
                                 " --threshold 1.0 --out " + ddir.string() + common,
                             dir);
    CHECK(dist.exit_code == 0);
    CHECK(dist.output.find("kept") != std::string::npos);

    std::ifstream in(ddir / "report.json");
    nlohmann::json doc = nlohmann::json::parse(in);
    CHECK(doc["replacements"]["replaced"].get<int>() == 0);
    // Nothing swapped: student costs exactly the teacher.
    CHECK(doc["cost"]["mac_ratio"].get<double>() == doctest::Approx(1.0));
}

TEST_CASE("cli: wfd without a profile falls back to cost-model weights with a notice") {
    const fs::path dir = fresh_dir("wfdnote");
    const std::string common = " --model " + kToyModel + " --dataset-size 100 --seed 7";
    const fs::path tdir = dir / "teacher";
    REQUIRE(run_cli("train-teacher --teacher-epochs 1 --out " + tdir.string() + common, dir)
                .exit_code == 0);
    CliResult dist = run_cli("distill --teacher-weights " + (tdir / "teacher.pbkd").string() +
                                 " --epochs-per-block 1 --max-steps 1 --finetune-epochs 0" +
                                 " --threshold 1.0 --policy wfd --workers 2 --out " +
                                 (dir / "run").string() + common,
                             dir);
    CHECK(dist.exit_code == 0);
    CHECK(dist.output.find("note:") != std::string::npos);
}
