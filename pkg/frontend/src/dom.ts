/** DOM rendering: job cards with badge, thumbnails, terminal and results. */

import type { ApiClient } from "./api.js";
import type { JobStore } from "./store.js";
import { buildResultView, type ResultView } from "./views.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K, className?: string, text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export class JobCard {
  readonly root: HTMLElement;
  private badge: HTMLElement;
  private terminal: HTMLPreElement;
  private resultPanel: HTMLElement;
  private renderedLines = 0;
  private autoScroll = true;

  constructor(
    private readonly store: JobStore,
    private readonly api: ApiClient,
    thumbnails: string[],
  ) {
    this.root = el("section", "job-card");
    const header = el("header", "job-header");
    header.append(
      el("h3", "", `${store.functionality} · ${store.jobId.slice(0, 8)}`),
    );
    this.badge = el("span", "badge badge-submitted", "submitted");
    header.append(this.badge);
    this.root.append(header);

    if (thumbnails.length > 0) {
      const strip = el("div", "thumbs");
      for (const url of thumbnails) {
        const img = el("img", "thumb");
        img.src = url;
        strip.append(img);
      }
      this.root.append(strip);
    }

    this.terminal = el("pre", "terminal");
    this.terminal.addEventListener("scroll", () => {
      const nearBottom = this.terminal.scrollTop + this.terminal.clientHeight
        >= this.terminal.scrollHeight - 4;
      this.autoScroll = nearBottom;
    });
    this.root.append(this.terminal);

    this.resultPanel = el("div", "result-panel");
    this.root.append(this.resultPanel);

    store.onChange(() => this.render());
    this.render();
  }

  private render(): void {
    this.badge.textContent = this.store.badge;
    this.badge.className = `badge badge-${this.store.badge}`;

    // Append only the new lines; the terminal is append-only.
    const lines = this.store.lines;
    for (; this.renderedLines < lines.length; this.renderedLines++) {
      this.terminal.append(lines[this.renderedLines].text + "\n");
    }
    if (this.autoScroll) this.terminal.scrollTop = this.terminal.scrollHeight;

    if (this.store.isTerminal) {
      this.renderResult();
    }
  }

  private renderResult(): void {
    this.resultPanel.replaceChildren();
    if (this.store.badge === "failed") {
      const banner = el("div", "banner banner-failed",
        `job failed: ${this.store.failures.join("; ") || "see terminal"}`);
      this.resultPanel.append(banner);
      return;
    }
    this.resultPanel.append(el("div", "banner banner-done", "job complete"));
    const view = buildResultView(this.store,
      (key) => this.api.artifactUrl(this.store.jobId, key));
    this.resultPanel.append(this.renderView(view));
    this.resultPanel.append(this.saveControl());
  }

  private renderView(view: ResultView): HTMLElement {
    const container = el("div", `result result-${view.kind}`);
    if (view.kind === "classify") {
      for (const table of view.tables ?? []) {
        container.append(el("h4", "", table.image));
        const tbl = el("table", "classify-table");
        for (const row of table.rows) {
          const tr = el("tr");
          tr.append(el("td", "label-cell", row.label));
          const barCell = el("td", "bar-cell");
          const bar = el("div", "bar");
          bar.style.width = `${row.percent}%`;
          barCell.append(bar);
          tr.append(barCell);
          tr.append(el("td", "conf-cell", row.confidence.toFixed(4)));
          tbl.append(tr);
        }
        container.append(tbl);
      }
    } else if (view.kind === "panorama" && view.panoramaUrl) {
      const img = el("img", "panorama");
      img.src = view.panoramaUrl;
      container.append(img);
    } else if (view.kind === "vip") {
      for (const overlay of view.overlays ?? []) {
        container.append(el("h4", "", overlay.image));
        const stage = el("div", "vip-stage");
        stage.style.aspectRatio = `${overlay.width} / ${overlay.height}`;
        for (const box of overlay.boxes) {
          const marker = el("div", "vip-box", String(box.rank));
          marker.style.left = `${(box.x / overlay.width) * 100}%`;
          marker.style.top = `${(box.y / overlay.height) * 100}%`;
          marker.style.width = `${(box.w / overlay.width) * 100}%`;
          marker.style.height = `${(box.h / overlay.height) * 100}%`;
          stage.append(marker);
        }
        container.append(stage);
      }
    } else if (view.kind === "features") {
      const list = el("ul", "downloads");
      for (const item of view.downloads ?? []) {
        const anchor = el("a", "", item.key.split("/").pop() ?? item.key);
        anchor.setAttribute("href", item.url);
        anchor.setAttribute("download", "");
        const li = el("li");
        li.append(anchor);
        list.append(li);
      }
      container.append(list);
    } else {
      container.append(el("pre", "", view.raw ?? ""));
    }
    return container;
  }

  private saveControl(): HTMLElement {
    const row = el("div", "save-row");
    const input = el("input") as HTMLInputElement;
    input.placeholder = "save to… e.g. dropbox:/results or local:/tmp/out";
    const button = el("button", "", "save artifacts");
    const note = el("span", "save-note");
    button.addEventListener("click", () => {
      // Artifact copies are client-side downloads in the browser; trigger
      // one download per artifact under the chosen name prefix.
      for (const key of this.store.artifacts) {
        const anchor = document.createElement("a");
        anchor.href = this.api.artifactUrl(this.store.jobId, key);
        anchor.download = key.replace(/\//g, "_");
        anchor.click();
      }
      note.textContent = `${this.store.artifacts.length} artifact(s) downloading`;
    });
    row.append(input, button, note);
    return row;
  }
}
