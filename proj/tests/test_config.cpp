// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <json.hpp>

#include "diversenet/config.hpp"
#include "diversenet/report.hpp"

using namespace diversenet;
using nlohmann::json;

namespace {

json minimal(const std::string& method) {
  return json{{"method", method},
              {"data", {{"synth", {{"train_count", 8}, {"val_count", 2}, {"test_count", 2},
                                   {"size", 24}, {"classes", 3}}}}}};
}

}  // namespace

TEST_CASE("a minimal config gets every documented default, echoed") {
  ExperimentConfig cfg = parse_config(minimal("diversehead-df"));
  CHECK(cfg.model.head_count == 10);
  CHECK(cfg.model.class_count == 3);
  CHECK(cfg.model.trunk == "desk");
  CHECK(cfg.model.dropout_rate == 0.0);
  CHECK(cfg.train.loss.lambda == 1.0);
  CHECK(cfg.train.vote.phi == 1.0);
  CHECK(cfg.train.vote.mode == VoteWeight::Mode::kFixed);
  CHECK(cfg.train.base_lr == 0.01);
  CHECK(cfg.train.power == 0.9);
  CHECK(cfg.train.momentum == 0.9);
  CHECK(cfg.train.weight_decay == 1e-4);
  CHECK(cfg.batch_size == 8);
  CHECK(cfg.epochs == 10);
  CHECK(cfg.eval_every == 1);
  CHECK(cfg.data.labelled_fraction == 0.25);
  CHECK(cfg.output_dir == "runs/diversehead-df");

  // echo carries the defaults
  CHECK(cfg.echo.at("optimizer").at("base_lr") == 0.01);
  CHECK(cfg.echo.at("loss").at("lambda") == 1.0);
  CHECK(cfg.echo.at("model").at("heads") == 10);
  // the echo is itself a valid config and reparses to the same echo
  ExperimentConfig again = parse_config(cfg.echo);
  CHECK(again.echo == cfg.echo);
  CHECK(config_hash(again) == config_hash(cfg));
}

TEST_CASE("method defaults differ between multi-head and baselines") {
  CHECK(parse_config(minimal("base")).model.head_count == 1);
  CHECK(parse_config(minimal("shs")).model.head_count == 1);
  CHECK(parse_config(minimal("diversehead-dt")).model.dropout_rate == 0.5);
  ExperimentConfig dm = parse_config(minimal("diversemodel"));
  CHECK(dm.dm_models == std::vector<std::string>{"pyramid", "unet", "segnet"});
  ExperimentConfig ip = parse_config(minimal("input-perturb"));
  CHECK(ip.train.noise.sd == 0.01);
}

TEST_CASE("unknown keys are rejected with their path") {
  json j = minimal("base");
  j["optimizzer"] = json::object();
  CHECK_THROWS_WITH(parse_config(j), Catch::Matchers::ContainsSubstring("optimizzer"));

  json j2 = minimal("base");
  j2["optimizer"]["lr"] = 0.1;
  CHECK_THROWS_WITH(parse_config(j2), Catch::Matchers::ContainsSubstring("optimizer.lr"));

  json j3 = minimal("base");
  j3["data"]["synth"]["shape_count"] = 3;
  CHECK_THROWS_WITH(parse_config(j3), Catch::Matchers::ContainsSubstring("data.synth.shape_count"));
}

TEST_CASE("cross-field violations are caught before any model is built") {
  json df = minimal("diversehead-df");
  df["model"] = {{"dropout_rate", 0.5}};
  CHECK_THROWS_AS(parse_config(df), ConfigError);

  json dt = minimal("diversehead-dt");
  dt["model"] = {{"dropout_rate", 0.0}};
  CHECK_THROWS_AS(parse_config(dt), ConfigError);

  json base = minimal("base");
  base["model"] = {{"heads", 4}};
  CHECK_THROWS_AS(parse_config(base), ConfigError);

  json dh = minimal("diversehead-df");
  dh["model"] = {{"heads", 1}};
  CHECK_THROWS_AS(parse_config(dh), ConfigError);

  json dm = minimal("diversemodel");
  dm["dm_models"] = {"pyramid", "unet"};
  CHECK_THROWS_AS(parse_config(dm), ConfigError);

  json noise = minimal("base");
  noise["noise"] = {{"sd", 0.01}};
  CHECK_THROWS_AS(parse_config(noise), ConfigError);

  json both = minimal("base");
  both["data"]["manifest"] = "x.json";
  CHECK_THROWS_AS(parse_config(both), ConfigError);

  json mismatch = minimal("base");
  mismatch["model"] = {{"classes", 5}};
  CHECK_THROWS_AS(parse_config(mismatch), ConfigError);

  json ip = minimal("input-perturb");
  ip["noise"] = {{"sd", 0.0}};
  CHECK_THROWS_AS(parse_config(ip), ConfigError);

  CHECK_THROWS_AS(parse_config(json{{"data", json::object()}}), ConfigError);
  CHECK_THROWS_AS(parse_config(minimal("gradient-boost")), ConfigError);
}

TEST_CASE("config hash ignores output location but tracks computation") {
  json a = minimal("shs");
  json b = minimal("shs");
  b["output_dir"] = "elsewhere";
  CHECK(config_hash(parse_config(a)) == config_hash(parse_config(b)));

  json c = minimal("shs");
  c["seed"] = 99;
  CHECK(config_hash(parse_config(a)) != config_hash(parse_config(c)));

  json d = minimal("shs");
  d["provenance"] = {{"overrides", {"seed=0"}}};
  CHECK(config_hash(parse_config(a)) == config_hash(parse_config(d)));
}

TEST_CASE("percent formatting rounds half to even at two decimals") {
  CHECK(format_percent(1.0) == "100.00%");
  CHECK(format_percent(0.583333) == "58.33%");
  CHECK(format_percent(0.0) == "0.00%");
  CHECK(format_percent(std::nullopt) == "n/a");
  // ties: 0.12345 -> 12.345% -> 12.34% (even), 0.12355 -> 12.36% (even)
  CHECK(format_percent(0.123450) == "12.34%");
  CHECK(format_percent(0.123550) == "12.36%");
}

TEST_CASE("metric table renders one row per report in the OA UA PA mIoU F1 order") {
  MetricReport perfect;
  perfect.oa = 1.0;
  perfect.macro_ua = 1.0;
  perfect.macro_pa = 1.0;
  perfect.miou = 1.0;
  perfect.macro_f1 = 1.0;
  perfect.per_class = {{1.0, 1.0, 1.0, 1.0}};
  json rep;
  rep["arm"] = "base";
  rep["final_test"] = to_json(perfect);
  const std::string table = format_metric_table({rep});
  CHECK(table.find("OA") < table.find("UA"));
  CHECK(table.find("UA") < table.find("PA"));
  CHECK(table.find("PA") < table.find("mIoU"));
  CHECK(table.find("mIoU") < table.find("F1"));
  CHECK(table.find("base") != std::string::npos);
  CHECK(table.find("100.00%") != std::string::npos);

  // metric reports survive the json round trip
  MetricReport back = metric_report_from_json(to_json(perfect));
  CHECK(back.oa == 1.0);
  CHECK(back.miou.value() == 1.0);
  CHECK(back.per_class.size() == 1);
}
