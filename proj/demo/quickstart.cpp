// Library walkthrough: load the demo corpus, refine its instructions, rank
// training tasks for each held-out task and sample a small mixture.

#include <filesystem>
#include <iostream>

#include "insta/insta.hpp"

int main(int argc, char** argv) {
  namespace fs = std::filesystem;
  const fs::path corpus = argc > 1 ? fs::path(argv[1]) : fs::path(INSTA_DEMO_DIR) / "data" / "corpus.jsonl";

  const auto raw = insta::load_manifest(corpus);
  const auto refined = insta::refine_corpus(raw, {}).corpus;
  const auto stats = insta::corpus_stats(refined);
  std::cout << stats.train_tasks << " train tasks in " << stats.train_clusters << " clusters, " << stats.eval_tasks
            << " eval tasks\n";

  insta::ReferenceBackend backend(1024);
  insta::Embedder embedder(backend);

  insta::TrainConfig train;
  train.learning_rate = 3.0;
  train.n_pos = train.n_neg = 200;
  train.seed = 7;
  const auto head = insta::train_head(refined, embedder, train).head;

  for (const auto& task : refined.tasks()) {
    if (task.split != insta::Split::eval) continue;
    insta::ScoringOptions opt;
    opt.use_refined = true;
    const auto plain = insta::select_top_k(insta::score_matrix(task.id, refined, embedder, opt), 3);
    opt.head = &head;
    const auto aligned = insta::select_top_k(insta::score_matrix(task.id, refined, embedder, opt), 3);

    std::cout << "\n" << task.id << " (" << task.name << ")\n";
    for (const auto* sel : {&plain, &aligned}) {
      std::cout << "  " << sel->method << ":";
      for (const auto& r : sel->ranked) std::cout << " " << r.task << "=" << r.score;
      std::cout << "\n";
    }
    const auto mix = insta::build_mixture(aligned, refined, 2, 13, insta::PromptStyle::def);
    std::cout << "  mixture: " << mix.total_instances << " instances\n";
    std::cout << "  first prompt:\n" << mix.entries.front().records.front().rendered_input.value() << "\n";
  }

  const auto c = insta::cost_report(insta::Method::insta, 8, 2, 2, 3);
  const auto d = insta::cost_report(insta::Method::dsta, 8, 2, 2, 3);
  std::cout << "\nencode ops: insta " << c.encode_ops << ", dsta " << d.encode_ops << "\n";
}
