/**
 * Interactive console entry point. Commands:
 *
 *   loc <lat> <lon> <description>   start a session
 *   add <more description>          refine the current session
 *   rerank                          force confidence re-ranking
 *   quit
 *
 * Point it at a running service with TEXTLOC_API (default
 * http://127.0.0.1:8000).
 */

import * as readline from "node:readline/promises";
import { ApiClient, type FetchLike } from "./api.js";
import { cardText } from "./render.js";
import { SessionController, canSubmit, type SessionView } from "./session.js";

function show(view: SessionView): void {
  if (view.errorBanner) {
    console.log(`! ${view.errorBanner}`);
    return;
  }
  console.log(`session ${view.sessionId} (${view.modality ?? "?"})` +
    (view.reranked ? " [re-ranked]" : ""));
  for (const card of view.candidates) console.log(cardText(card));
}

async function main(): Promise<void> {
  const base = process.env.TEXTLOC_API ?? "http://127.0.0.1:8000";
  const api = new ApiClient(base, fetch as unknown as FetchLike);
  const controller = new SessionController(api);
  const rl = readline.createInterface({ input: process.stdin, output: process.stdout });

  console.log(`textloc console -> ${base}`);
  for (;;) {
    const line = (await rl.question("> ")).trim();
    if (line === "quit" || line === "exit") break;
    try {
      if (line.startsWith("loc ")) {
        const [, lat, lon, ...rest] = line.split(/\s+/);
        const text = rest.join(" ");
        if (!canSubmit(controller.state, text, controller.busy)) {
          console.log("! empty description or request in flight");
          continue;
        }
        show(await controller.localize({
          text, lat: Number(lat), lon: Number(lon), M: 100, K: 5, explain: true,
        }));
      } else if (line.startsWith("add ")) {
        const extra = line.slice(4);
        if (!canSubmit(controller.state, extra, controller.busy)) {
          console.log("! empty refinement or request in flight");
          continue;
        }
        show(await controller.refine(extra));
      } else if (line === "rerank") {
        show(await controller.rerank());
      } else if (line.length > 0) {
        console.log("commands: loc <lat> <lon> <text> | add <text> | rerank | quit");
      }
    } catch {
      // error already recorded on the session view
      show(controller.state);
    }
  }
  rl.close();
}

main();
