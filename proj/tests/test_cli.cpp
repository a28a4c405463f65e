#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int status = -1;
  std::string out;
};

Result run(const std::string& args) {
  const auto out_file = fs::temp_directory_path() / "occlumesh_test_cli_stdout.txt";
  const std::string cmd = std::string(OCCLUMESH_CLI) + " " + args + " > " + out_file.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  std::ifstream in(out_file);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, ss.str()};
}

// Last JSON object on stdout, skipping the echoed config line.
nlohmann::json last_json(const std::string& text) {
  const auto pos = text.rfind("\n{\n");
  return nlohmann::json::parse(text.substr(pos == std::string::npos ? text.find('{') : pos + 1));
}

}  // namespace

TEST_CASE("usage errors exit with status 2 and a one-line error") {
  const auto r = run("finetune --data x --out y");
  CHECK(r.status == 2);
  const auto err = nlohmann::json::parse(r.out);
  CHECK(err.at("error") == "usage");
  CHECK(err.at("schema") == 1);
  CHECK(run("gen --out x --bogus 3").status == 2);
  CHECK(run("").status == 2);
}

TEST_CASE("help lists the published defaults") {
  const auto r = run("pretrain --help");
  CHECK(r.status == 0);
  for (const char* s : {"--rays INT [150]", "--views INT [8]", "--lr FLOAT [0.001]", "--lr-floor FLOAT [5e-05]",
                        "--iterations INT [300000]"})
    CHECK(r.out.find(s) != std::string::npos);
  CHECK(run("finetune --help").out.find("--lr FLOAT [0.0004]") != std::string::npos);
  CHECK(run("eval --help").out.find("--points INT:POSITIVE [30000]") != std::string::npos);
}

TEST_CASE("gen is deterministic and eval scores identical meshes perfectly") {
  const auto root = fs::temp_directory_path() / "occlumesh_test_cli";
  fs::remove_all(root);
  const std::string common = "gen --scenes 2 --views 3 --res 24 --mesh-res 24 --seed 7 --out ";
  REQUIRE(run(common + (root / "a").string()).status == 0);
  REQUIRE(run(common + (root / "b").string()).status == 0);
  for (const auto* f : {"scene_00001/meta.json", "scene_00001/v02_rgb.png", "scene_00000/object_gt.obj"}) {
    std::ifstream a(root / "a" / f, std::ios::binary), b(root / "b" / f, std::ios::binary);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    CHECK(sa.str() == sb.str());
  }
  const auto gt = (root / "a" / "scene_00000" / "object_gt.obj").string();
  const auto r = run("eval --pred-mesh " + gt + " --gt-mesh " + gt + " --points 2000");
  REQUIRE(r.status == 0);
  const auto report = last_json(r.out);
  CHECK(report.at("schema") == 1);
  CHECK(report.at("chamfer_mm2") == 0.0);
  CHECK(report.at("f5") == 1.0);
  CHECK(report.at("f10") == 1.0);

  // A failing command leaves no output behind.
  const auto bad = run("pretrain --profile desk --data " + (root / "missing").string() + " --out " +
                       (root / "run").string());
  CHECK(bad.status == 1);
  CHECK(nlohmann::json::parse(bad.out.substr(bad.out.rfind('{'))).at("error") == "io");
  CHECK_FALSE(fs::exists(root / "run"));
  fs::remove_all(root);
}
