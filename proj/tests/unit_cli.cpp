#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "moesqueeze/cli.hpp"

using namespace moesq;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path d = fs::path(MOESQ_TEST_CACHE) / ("cli_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

// Runs the CLI with `args`; stdout and stderr go to <dir>/cli.log.
int run(const fs::path& dir, const std::string& args) {
    const std::string cmd = std::string("\"") + MOESQ_CLI_PATH + "\" " + args + " >>\"" + (dir / "cli.log").string() + "\" 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string out_flag(const fs::path& d) { return "--out \"" + d.string() + "\""; }

} // namespace

TEST(Cli, VersionAndUsageErrors) {
    const auto d = fresh_dir("usage");
    EXPECT_EQ(run(d, "--version"), 0);
    EXPECT_NE(slurp(d / "cli.log").find("0.3.0"), std::string::npos);
    EXPECT_EQ(run(d, "frobnicate"), 2);
    EXPECT_EQ(run(d, "gen --no-such-flag"), 2);
    EXPECT_EQ(run(d, "prune --alpha 1.5 " + out_flag(d)), 2);
    EXPECT_EQ(run(d, "prune --ratio 0 " + out_flag(d)), 2);
    EXPECT_EQ(run(d, ""), 2);
}

TEST(Cli, ManifestOnlyPruneAndConfigPrecedence) {
    const auto d = fresh_dir("dsv3");
    ASSERT_EQ(run(d, "gen --preset dsv3-shape " + out_flag(d)), 0);
    const auto man = "--manifest \"" + (d / "manifest.json").string() + "\" ";
    ASSERT_EQ(run(d, "prune " + man + out_flag(d)), 0);
    EXPECT_EQ(load_manifest(slurp(d / "manifest.pruned.json")).config.n_experts, 192);

    std::ofstream(d / "cfg.json") << R"({"ratio": 0.5})";
    const auto cfg = "--config \"" + (d / "cfg.json").string() + "\" ";
    ASSERT_EQ(run(d, "prune " + cfg + man + out_flag(d)), 0);
    EXPECT_EQ(load_manifest(slurp(d / "manifest.pruned.json")).config.n_experts, 128);
    ASSERT_EQ(run(d, "prune --ratio 0.25 " + cfg + man + out_flag(d)), 0);
    EXPECT_EQ(load_manifest(slurp(d / "manifest.pruned.json")).config.n_experts, 64);

    std::ofstream(d / "bad.json") << R"({"ratoi": 0.5})";
    EXPECT_EQ(run(d, "prune --config \"" + (d / "bad.json").string() + "\" " + man + out_flag(d)), 2);
}

TEST(Cli, InfeasibleAllocationExitsOne) {
    const auto d = fresh_dir("infeasible");
    ASSERT_EQ(run(d, "gen " + out_flag(d)), 0);
    std::ofstream(d / "records.csv") << "tensor,q_high,ppl_low,ppl_high,rho,sens\n";
    const auto man = "--manifest \"" + (d / "manifest.json").string() + "\" ";
    EXPECT_EQ(run(d, "allocate --mem-limit 1000 " + man + out_flag(d)), 1);
    EXPECT_NE(slurp(d / "cli.log").find("shortfall"), std::string::npos);
    EXPECT_EQ(run(d, "allocate " + man + out_flag(d)), 2); // no --mem-limit
    EXPECT_EQ(run(d, "allocate --mem-limit 1GB " + man + out_flag(d)), 0);
}

TEST(Cli, ReportMarksMissingPiecesAbsent) {
    const auto d = fresh_dir("absent");
    std::ofstream(d / "stats.csv") << "";
    EXPECT_EQ(run(d, "report " + out_flag(d)), 1);
    const auto rep = slurp(d / "report.txt");
    EXPECT_NE(rep.find("Expert activation counts: absent"), std::string::npos);
    EXPECT_NE(rep.find("Perplexity: absent"), std::string::npos);
    EXPECT_FALSE(fs::exists(d / "fig2.csv"));
}

TEST(Cli, PipelineIsDeterministic) {
    const auto a = fresh_dir("pipe_a"), b = fresh_dir("pipe_b");
    ASSERT_EQ(run(a, "pipeline --steps 20 --jobs 1 " + out_flag(a)), 0);
    ASSERT_EQ(run(b, "pipeline --steps 20 --jobs 2 " + out_flag(b)), 0);
    for (const char* f : {"alloc_plan.json", "report.txt", "records.csv", "stats.csv", "size_ppl.csv", "model.tmoeq"})
        EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;

    // size_ppl.csv mirrors eval.json
    const auto ev = nlohmann::json::parse(slurp(a / "eval.json"));
    std::stringstream csv(slurp(a / "size_ppl.csv"));
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(line, "config,size_bytes,ppl");
    int rows = 0;
    while (std::getline(csv, line)) {
        const auto c1 = line.find(','), c2 = line.rfind(',');
        const auto key = line.substr(0, c1);
        EXPECT_EQ(std::stoll(line.substr(c1 + 1, c2 - c1 - 1)), ev.at(key).at("size_bytes").get<std::int64_t>());
        EXPECT_DOUBLE_EQ(std::stod(line.substr(c2 + 1)), ev.at(key).at("ppl").get<double>());
        ++rows;
    }
    EXPECT_EQ(rows, 3);
    const auto plan = alloc_plan_from_json(nlohmann::json::parse(slurp(a / "alloc_plan.json")));
    EXPECT_TRUE(plan.success);
    EXPECT_LE(plan.final_size, plan.ledger.m_limit);
}
