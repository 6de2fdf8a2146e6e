#include <gradflow/harness.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace gradflow;

TEST(Config, StepRanges) {
    EXPECT_EQ(parse_steps("2^3..2^6"), (std::vector<int>{8, 16, 32, 64}));
    EXPECT_EQ(parse_steps(" 4, 8 ,2^5"), (std::vector<int>{4, 8, 32}));
    EXPECT_EQ(parse_steps("2^0..2^0"), (std::vector<int>{1}));
    EXPECT_THROW(parse_steps("2^6..2^3"), ConfigError);
    EXPECT_THROW(parse_steps("3^2..3^4"), ConfigError);
    EXPECT_THROW(parse_steps("8,x"), ConfigError);
}

TEST(Config, KeyValueFiles) {
    std::istringstream is("# sweep\nproblem = heat_wass\nscheme=fi3  # third order\nsteps = 2^2..2^4\n"
                          "grid = 65\npolish = true\nfinal_time = 0.05\nmetric = wasserstein\n");
    const auto cfg = RunConfig::parse(is);
    EXPECT_EQ(cfg.problem, "heat_wass");
    EXPECT_EQ(cfg.scheme, "fi3");
    EXPECT_EQ(cfg.steps, (std::vector<int>{4, 8, 16}));
    EXPECT_EQ(cfg.grid, 65);
    EXPECT_TRUE(cfg.polish);
    EXPECT_EQ(cfg.final_time, 0.05);
    EXPECT_NO_THROW(cfg.validate());
}

TEST(Config, Errors) {
    std::istringstream unknown("colour = red\n");
    EXPECT_THROW(RunConfig::parse(unknown), ConfigError);
    std::istringstream malformed("problem heat_wass\n");
    EXPECT_THROW(RunConfig::parse(malformed), ConfigError);
    EXPECT_THROW(RunConfig::load("/nonexistent/file.cfg"), ConfigError);
    RunConfig cfg;
    cfg.problem = "heat_wass";
    cfg.steps = {8};
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.steps = {8, 8};
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.steps = {8, 16};
    cfg.scheme = "rk4";
    EXPECT_THROW(cfg.validate(), UnknownNameError);
    cfg.scheme = "si2";
    cfg.problem = "nope";
    EXPECT_THROW(cfg.validate(), UnknownNameError);
}

TEST(Output, EmptyReportIsHeaderOnlyCsv) {
    ConvergenceReport rep;
    std::ostringstream os;
    emit_csv(rep, os);
    EXPECT_EQ(os.str(), std::string(csv_header) + "\n");
}

TEST(Output, FailedRowsUseNanAndEmptyOrder) {
    ConvergenceReport rep;
    rep.scheme = "step2";
    ConvergenceRow a;
    a.steps = 8;
    a.k = 0.125;
    a.l2_error = 1e-3;
    ConvergenceRow b;
    b.steps = 16;
    b.k = 0.0625;
    b.failure = "diverged";
    rep.rows = {a, b};
    std::ostringstream os;
    emit_csv(rep, os);
    std::istringstream is(os.str());
    std::string header, l1, l2;
    std::getline(is, header);
    std::getline(is, l1);
    std::getline(is, l2);
    EXPECT_EQ(l1.rfind("8,0.125,0.001,,0,", 0), 0u) << l1;
    EXPECT_EQ(l2.rfind("16,0.0625,nan,,0,", 0), 0u) << l2;
    const std::string table = emit_table(rep);
    EXPECT_NE(table.find("Number of time steps"), std::string::npos);
    EXPECT_NE(table.find("2^4"), std::string::npos);
    EXPECT_NE(table.find("failed: diverged"), std::string::npos);
}

TEST(Sweep, ZeroFinalTimeGivesZeroErrors) {
    RunConfig cfg;
    cfg.problem = "heat_wass";
    cfg.steps = {2, 4};
    cfg.grid = 33;
    cfg.final_time = 0.0;
    const auto rep = converge(cfg);
    ASSERT_EQ(rep.rows.size(), 2u);
    for (const auto& r : rep.rows) {
        EXPECT_TRUE(r.ok()) << r.failure;
        EXPECT_EQ(r.l2_error, 0.0);
        EXPECT_FALSE(r.observed_order.has_value());
    }
}

TEST(Sweep, HeatFlowConvergesAndWritesOutputs) {
    RunConfig cfg;
    cfg.problem = "heat_wass";
    cfg.scheme = "fi2";
    cfg.steps = {8, 16, 32};
    cfg.grid = 65;
    cfg.polish = true;
    cfg.out_dir = std::string(GRADFLOW_TEST_TMP) + "/sweep_heat";
    OracleCache cache;
    const auto rep = converge(cfg, &cache);
    ASSERT_TRUE(rep.final_order().has_value());
    EXPECT_NEAR(*rep.final_order(), 2.0, 0.2);
    EXPECT_EQ(rep.total_energy_violations(), 0);
    write_outputs(cfg, rep);
    for (const char* f : {"convergence.csv", "energy.csv", "snapshot.csv"}) {
        EXPECT_TRUE(std::filesystem::exists(cfg.out_dir + "/" + f)) << f;
    }
    std::ifstream csv(cfg.out_dir + "/convergence.csv");
    std::string line;
    int lines = 0;
    while (std::getline(csv, line)) ++lines;
    EXPECT_EQ(lines, 4);
    double seconds = -1.0;
    cache.get(make_problem("heat_wass", 65), 65, 32 * 8, 3, &seconds);
    EXPECT_EQ(seconds, 0.0);
}

TEST(Verify, BuiltinsPassExceptPrintedThresholds) {
    const auto rep = verify_all(5);
    for (const auto& c : rep.tableaus) {
        EXPECT_GE(c.order, c.claimed_order) << c.name;
        EXPECT_LE(c.polish_residual, 1e-13) << c.name;
        EXPECT_TRUE(c.equivalence_ok) << c.name;
    }
}
